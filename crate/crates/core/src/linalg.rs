//! Dense linear-algebra helpers shared by the solvers.
//!
//! Everything is column-major `nalgebra` storage, which matches the tensor
//! linearization used throughout the crate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Column-wise Khatri-Rao product. The first matrix has the fastest-varying
/// row index, so `khatri_rao(&[a, b])` column `r` is `b[:, r] ⊗ a[:, r]`.
pub fn khatri_rao(mats: &[&Mat]) -> Mat {
    assert!(!mats.is_empty(), "khatri_rao needs at least one matrix");
    let rank = mats[0].ncols();
    assert!(
        mats.iter().all(|m| m.ncols() == rank),
        "khatri_rao: column counts differ"
    );
    let rows: usize = mats.iter().map(|m| m.nrows()).product();
    let mut out = Mat::zeros(rows, rank);
    for r in 0..rank {
        let mut col = vec![1.0];
        for m in mats {
            let mut next = Vec::with_capacity(col.len() * m.nrows());
            for i in 0..m.nrows() {
                let v = m[(i, r)];
                next.extend(col.iter().map(|c| c * v));
            }
            col = next;
        }
        out.column_mut(r).copy_from_slice(&col);
    }
    out
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Mat::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn sym_eigen(m: &Mat) -> (Vector, Mat) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Moore-Penrose pseudo-inverse. Returns the inverse and whether any singular
/// value fell below `rtol * max(singular values)`.
pub fn pinv(m: &Mat, rtol: f64) -> (Mat, bool) {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return (Mat::zeros(c, r), false);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let cut = rtol * smax.max(f64::MIN_POSITIVE);
    let mut deficient = false;
    let mut out = Mat::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cut {
            deficient = true;
            continue;
        }
        out += vt.row(k).transpose() * u.column(k).transpose() / s;
    }
    if svd.singular_values.len() < r.min(c) {
        deficient = true;
    }
    (out, deficient)
}

/// Solves `a x = b` for symmetric positive (semi)definite `a`, adding a small
/// ridge when the Cholesky factorization fails.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let scale = a.diagonal().amax().max(1.0);
    for k in [1e-12, 1e-10, 1e-8, 1e-6] {
        let mut reg = a.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += k * scale;
        }
        if let Some(ch) = reg.cholesky() {
            log::warn!("solve_spd: added ridge {:e} to reach positive definiteness", k * scale);
            return Ok(ch.solve(b));
        }
    }
    Err(Error::Numerical(
        "matrix is not positive definite even after ridge regularization".into(),
    ))
}

/// General square solve via LU; fails on exact singularity.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

pub fn frob2(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Tucker congruence `|<u, v>| / (|u| |v|)`; zero vectors give 0.
pub fn congruence(u: &[f64], v: &[f64]) -> f64 {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    (uv / (uu.sqrt() * vv.sqrt())).abs()
}

/// Pearson correlation; constant inputs give 0.
pub fn pearson(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    if u.is_empty() {
        return 0.0;
    }
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += (a - mu) * (b - mv);
        uu += (a - mu) * (a - mu);
        vv += (b - mv) * (b - mv);
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    uv / (uu.sqrt() * vv.sqrt())
}

/// Orthonormal basis completing the columns of `q` (assumed orthonormal) to a
/// full basis of its row space. Works for real and complex scalars.
pub(crate) fn complete_basis<T>(q: &DMatrix<T>) -> DMatrix<T>
where
    T: nalgebra::ComplexField,
{
    let (n, m) = q.shape();
    if m >= n {
        return q.clone();
    }
    let mut aug = DMatrix::<T>::zeros(n, m + n);
    aug.view_mut((0, 0), (n, m)).copy_from(q);
    for i in 0..n {
        aug[(i, m + i)] = T::one();
    }
    let full_q = aug.qr().q();
    let mut out = DMatrix::<T>::zeros(n, n);
    out.view_mut((0, 0), (n, m)).copy_from(q);
    out.view_mut((0, m), (n, n - m))
        .copy_from(&full_q.view((0, m), (n, n - m)));
    out
}
