//! Third-order tensor algebra under the t-product.
//!
//! A tensor `I × J × K` is treated as a `K`-long tube of `I × J` matrices. The
//! t-product is circular convolution along the tubes, so after a DFT along the
//! third mode every operation becomes facewise matrix algebra. Real inputs
//! have conjugate-symmetric Fourier faces; only faces `0..=K/2` are
//! factorized and the rest are mirrored, which keeps spatial results real.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{complete_basis, Mat, Vector};
use crate::tensor::{ComplexTensor, DenseTensor};

pub type CMat = DMatrix<Complex64>;

/// Factors of the t-SVD `X = U *t D *t Vᵀ`.
#[derive(Debug, Clone)]
pub struct TSvdFactors {
    pub u: DenseTensor,
    pub d: DenseTensor,
    pub v: DenseTensor,
}

/// SVD of one Fourier-domain face with full square `u` and `v`.
#[derive(Debug, Clone)]
pub(crate) struct FaceSvd {
    pub u: CMat,
    pub s: Vector,
    pub v: CMat,
}

fn check_order3(x: &DenseTensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[i, j, k] => Ok((i, j, k)),
        s => shape_err(format!("expected an order-3 tensor, got shape {s:?}")),
    }
}

fn transform_tubes(data: &mut [Complex64], tubes: usize, depth: usize, inverse: bool) {
    if depth <= 1 {
        return;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(depth)
    } else {
        planner.plan_fft_forward(depth)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); depth];
    let scale = if inverse { 1.0 / depth as f64 } else { 1.0 };
    for t in 0..tubes {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = data[t + tubes * k];
        }
        fft.process(&mut buf);
        for (k, b) in buf.iter().enumerate() {
            data[t + tubes * k] = *b * scale;
        }
    }
}

/// DFT along the third mode.
pub fn fft3(x: &DenseTensor) -> Result<ComplexTensor> {
    let (i, j, k) = check_order3(x)?;
    let mut c = x.to_complex();
    transform_tubes(c.data_mut(), i * j, k, false);
    Ok(c)
}

/// Inverse DFT along the third mode, keeping the complex result.
pub fn ifft3(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (i, j, k) = match x.shape() {
        &[i, j, k] => (i, j, k),
        s => return shape_err(format!("expected an order-3 tensor, got shape {s:?}")),
    };
    let mut c = x.clone();
    transform_tubes(c.data_mut(), i * j, k, true);
    Ok(c)
}

pub(crate) fn fourier_faces(x: &DenseTensor) -> Result<Vec<CMat>> {
    let (_, _, k) = check_order3(x)?;
    let f = fft3(x)?;
    (0..k).map(|kk| f.face(kk)).collect()
}

/// Inverse transform of conjugate-symmetric faces; the imaginary residue is
/// checked and dropped.
pub(crate) fn from_fourier_faces(faces: &[CMat]) -> Result<DenseTensor> {
    let t = ComplexTensor::from_faces(faces)?;
    let spatial = ifft3(&t)?;
    let scale = spatial
        .data()
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max)
        .max(1.0);
    let residue = spatial.max_imag();
    if residue > 1e-10 * scale {
        return Err(Error::Numerical(format!(
            "inverse transform left imaginary residue {residue:e}"
        )));
    }
    Ok(spatial.real_part())
}

/// Fills faces `K/2+1..K` as conjugates of their mirrors.
fn mirror_faces<T>(half: Vec<T>, depth: usize, conj: impl Fn(&T) -> T) -> Vec<T>
where
    T: Clone,
{
    let mut all = half;
    for kk in all.len()..depth {
        let mirrored = conj(&all[depth - kk]);
        all.push(mirrored);
    }
    all
}

fn half_count(depth: usize) -> usize {
    depth / 2 + 1
}

fn is_self_conjugate(kk: usize, depth: usize) -> bool {
    kk == 0 || 2 * kk == depth
}

/// Frontal faces stacked vertically: `(I·K) × J`.
pub fn matvec(x: &DenseTensor) -> Result<Mat> {
    let (i, j, k) = check_order3(x)?;
    let mut out = Mat::zeros(i * k, j);
    for kk in 0..k {
        out.view_mut((kk * i, 0), (i, j)).copy_from(&x.face(kk)?);
    }
    Ok(out)
}

/// Inverse of [`matvec`] for a given depth.
pub fn unmatvec(m: &Mat, depth: usize) -> Result<DenseTensor> {
    if depth == 0 || m.nrows() % depth != 0 {
        return shape_err(format!(
            "{} rows cannot be split into {depth} faces",
            m.nrows()
        ));
    }
    let i = m.nrows() / depth;
    let faces: Vec<Mat> = (0..depth)
        .map(|kk| m.view((kk * i, 0), (i, m.ncols())).clone_owned())
        .collect();
    DenseTensor::from_faces(&faces)
}

/// Block-Toeplitz rearrangement: block `(r, c)` is face `r − c` when `r ≥ c`
/// and the transpose of face `c − r` above the diagonal.
pub fn tplz(x: &DenseTensor) -> Result<Mat> {
    let (i, j, k) = check_order3(x)?;
    let faces: Vec<Mat> = (0..k).map(|kk| x.face(kk)).collect::<Result<_>>()?;
    let mut out = Mat::zeros(i * k, j * k);
    for r in 0..k {
        for c in 0..k {
            let block = if r >= c {
                faces[r - c].clone()
            } else {
                faces[c - r].transpose()
            };
            if block.shape() != (i, j) {
                return shape_err(format!(
                    "transposed faces of a {i}x{j} tensor do not fit a block-Toeplitz layout"
                ));
            }
            out.view_mut((r * i, c * j), (i, j)).copy_from(&block);
        }
    }
    Ok(out)
}

/// t-identity: face 0 is the identity, the remaining faces are zero.
pub fn t_identity(n: usize, depth: usize) -> DenseTensor {
    DenseTensor::from_fn(&[n, n, depth], |idx| {
        if idx[2] == 0 && idx[0] == idx[1] {
            1.0
        } else {
            0.0
        }
    })
}

/// t-product `X *t Y` for `X: I×J×K` and `Y: J×L×K`.
pub fn t_product(x: &DenseTensor, y: &DenseTensor) -> Result<DenseTensor> {
    let (_, j, k) = check_order3(x)?;
    let (j2, _, k2) = check_order3(y)?;
    if j != j2 || k != k2 {
        return shape_err(format!(
            "t-product of {:?} and {:?}: inner extents or depths differ",
            x.shape(),
            y.shape()
        ));
    }
    let fx = fourier_faces(x)?;
    let fy = fourier_faces(y)?;
    let half: Vec<CMat> = (0..half_count(k).min(k))
        .map(|kk| &fx[kk] * &fy[kk])
        .collect();
    let faces = mirror_faces(half, k, |m| m.map(|v| v.conj()));
    from_fourier_faces(&faces)
}

/// t-transpose: face 0 transposed, faces `1..K` transposed in reverse order.
pub fn t_transpose(x: &DenseTensor) -> Result<DenseTensor> {
    let (_, _, k) = check_order3(x)?;
    let faces: Vec<Mat> = (0..k)
        .map(|kk| x.face((k - kk) % k).map(|f| f.transpose()))
        .collect::<Result<_>>()?;
    DenseTensor::from_faces(&faces)
}

fn real_face_svd(face: &CMat) -> FaceSvd {
    let re: Mat = face.map(|v| v.re);
    let (i, j) = re.shape();
    let svd = re.svd(true, true);
    let u = complete_basis(&svd.u.expect("u requested"));
    let v = complete_basis(&svd.v_t.expect("v_t requested").transpose());
    debug_assert_eq!((u.nrows(), v.nrows()), (i, j));
    FaceSvd {
        u: u.map(|v| Complex64::new(v, 0.0)),
        s: svd.singular_values,
        v: v.map(|v| Complex64::new(v, 0.0)),
    }
}

fn complex_face_svd(face: &CMat) -> FaceSvd {
    let svd = face.clone().svd(true, true);
    let u = complete_basis(&svd.u.expect("u requested"));
    let v = complete_basis(&svd.v_t.expect("v_t requested").adjoint());
    FaceSvd {
        u,
        s: svd.singular_values,
        v,
    }
}

/// Full SVDs of every Fourier face (mirrored for the redundant half).
pub(crate) fn face_svds(x: &DenseTensor) -> Result<Vec<FaceSvd>> {
    let (_, _, k) = check_order3(x)?;
    let faces = fourier_faces(x)?;
    let half: Vec<FaceSvd> = (0..half_count(k).min(k))
        .map(|kk| {
            if is_self_conjugate(kk, k) {
                real_face_svd(&faces[kk])
            } else {
                complex_face_svd(&faces[kk])
            }
        })
        .collect();
    for f in &half {
        if f.s.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("SVD of a Fourier face failed".into()));
        }
    }
    Ok(mirror_faces(half, k, |f| FaceSvd {
        u: f.u.map(|v| v.conj()),
        s: f.s.clone(),
        v: f.v.map(|v| v.conj()),
    }))
}

fn diag_face(s: &Vector, rows: usize, cols: usize) -> CMat {
    let mut d = CMat::zeros(rows, cols);
    for (q, &sv) in s.iter().enumerate() {
        d[(q, q)] = Complex64::new(sv, 0.0);
    }
    d
}

/// t-SVD `X = U *t D *t Vᵀ` with t-orthogonal `U`, `V` and f-diagonal `D`.
pub fn t_svd(x: &DenseTensor) -> Result<TSvdFactors> {
    let (i, j, _) = check_order3(x)?;
    let svds = face_svds(x)?;
    let us: Vec<CMat> = svds.iter().map(|f| f.u.clone()).collect();
    let vs: Vec<CMat> = svds.iter().map(|f| f.v.clone()).collect();
    let ds: Vec<CMat> = svds.iter().map(|f| diag_face(&f.s, i, j)).collect();
    Ok(TSvdFactors {
        u: from_fourier_faces(&us)?,
        d: from_fourier_faces(&ds)?,
        v: from_fourier_faces(&vs)?,
    })
}

/// Rebuilds `U *t D *t Vᵀ`.
impl TSvdFactors {
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        t_product(&t_product(&self.u, &self.d)?, &t_transpose(&self.v)?)
    }
}

/// Best t-rank-`r` approximation: keeps the leading `r` singular triplets of
/// every Fourier face.
pub fn t_svd_truncate(x: &DenseTensor, r: usize) -> Result<DenseTensor> {
    facewise_singular_map(x, |q, _| q < r)
        .map(|(t, _)| t)
}

/// Applies a keep/shrink rule to every Fourier-face singular value and
/// reassembles the spatial tensor. The closure receives the index and the
/// value; returning false zeros it.
fn facewise_singular_map(
    x: &DenseTensor,
    keep: impl Fn(usize, f64) -> bool,
) -> Result<(DenseTensor, f64)> {
    let (i, j, _) = check_order3(x)?;
    let svds = face_svds(x)?;
    let mut smax: f64 = 0.0;
    let faces: Vec<CMat> = svds
        .iter()
        .map(|f| {
            let s = Vector::from_iterator(
                f.s.len(),
                f.s.iter().enumerate().map(|(q, &v)| {
                    smax = smax.max(v);
                    if keep(q, v) {
                        v
                    } else {
                        0.0
                    }
                }),
            );
            &f.u * diag_face(&s, i, j) * f.v.adjoint()
        })
        .collect();
    Ok((from_fourier_faces(&faces)?, smax))
}

/// Tensor nuclear norm: the sum of the diagonal entries `D(i, i, k)` of the
/// spatial-domain f-diagonal factor.
pub fn tnn(x: &DenseTensor) -> Result<f64> {
    let f = t_svd(x)?;
    let (i, j, k) = check_order3(&f.d)?;
    let mut total = 0.0;
    for kk in 0..k {
        for q in 0..i.min(j) {
            total += f.d.get(&[q, q, kk]);
        }
    }
    Ok(total)
}

/// Largest singular value over all Fourier faces.
pub fn max_t_singular(x: &DenseTensor) -> Result<f64> {
    Ok(face_svds(x)?
        .iter()
        .flat_map(|f| f.s.iter().copied())
        .fold(0.0, f64::max))
}

/// Soft-thresholds every Fourier-domain singular value by `lambda`:
/// `U *t ρ(D) *t Vᵀ` with `ρ(σ) = max(σ − λ, 0)`.
pub fn shrink_t_singular(x: &DenseTensor, lambda: f64) -> Result<DenseTensor> {
    if !(lambda >= 0.0) {
        return arg_err(format!("shrinkage must be nonnegative, got {lambda}"));
    }
    let (i, j, _) = check_order3(x)?;
    let svds = face_svds(x)?;
    let faces: Vec<CMat> = svds
        .iter()
        .map(|f| {
            let s = f.s.map(|v| (v - lambda).max(0.0));
            &f.u * diag_face(&s, i, j) * f.v.adjoint()
        })
        .collect();
    from_fourier_faces(&faces)
}

/// Shrunk t-pseudo-inverse `V *t ρ⁺(D) *t Uᵀ`: each Fourier singular value is
/// soft-thresholded by `lambda` and inverted where the result is positive.
/// Values at or below `rtol` times the largest singular value count as zero.
pub fn t_pinv_shrunk(x: &DenseTensor, lambda: f64, rtol: f64) -> Result<DenseTensor> {
    if !(lambda >= 0.0) {
        return arg_err(format!("shrinkage must be nonnegative, got {lambda}"));
    }
    let (i, j, _) = check_order3(x)?;
    let svds = face_svds(x)?;
    let smax = svds
        .iter()
        .flat_map(|f| f.s.iter().copied())
        .fold(0.0, f64::max);
    let cut = rtol * smax;
    let faces: Vec<CMat> = svds
        .iter()
        .map(|f| {
            let s = f.s.map(|v| {
                let shrunk = (v - lambda).max(0.0);
                if shrunk > cut && shrunk > 0.0 {
                    1.0 / shrunk
                } else {
                    0.0
                }
            });
            &f.v * diag_face(&s, j, i) * f.u.adjoint()
        })
        .collect();
    from_fourier_faces(&faces)
}
