//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use multiway::linalg::Mat;
use multiway::synth::{gaussian_matrix, rng};
use multiway::{DenseTensor, KruskalModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> DenseTensor {
    let len: usize = shape.iter().product();
    let g = gaussian_matrix(len.max(1), 1, r);
    DenseTensor::new(shape.to_vec(), g.as_slice()[..len].to_vec()).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Every multi-index of `shape`, first index fastest.
pub fn indices(shape: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    for mut lin in 0..total {
        let mut idx = Vec::with_capacity(shape.len());
        for &d in shape {
            idx.push(lin % d);
            lin /= d;
        }
        out.push(idx);
    }
    out
}

/// Contraction by explicit summation over every index tuple.
pub fn loop_contract(x: &DenseTensor, y: &DenseTensor, pairs: &[(usize, usize)]) -> DenseTensor {
    let xf: Vec<usize> = (0..x.order()).filter(|m| !pairs.iter().any(|p| p.0 == *m)).collect();
    let yf: Vec<usize> = (0..y.order()).filter(|m| !pairs.iter().any(|p| p.1 == *m)).collect();
    let mut shape: Vec<usize> = xf.iter().map(|&m| x.shape()[m]).collect();
    shape.extend(yf.iter().map(|&m| y.shape()[m]));
    if shape.is_empty() {
        shape.push(1);
    }
    let sum_shape: Vec<usize> = pairs.iter().map(|p| x.shape()[p.0]).collect();
    let sums = indices(&sum_shape);
    let mut out = DenseTensor::zeros(&shape);
    for o in indices(&shape) {
        let mut acc = 0.0;
        for s in &sums {
            let mut ix = vec![0; x.order()];
            let mut iy = vec![0; y.order()];
            for (k, &m) in xf.iter().enumerate() {
                ix[m] = o[k];
            }
            for (k, &m) in yf.iter().enumerate() {
                iy[m] = o[xf.len() + k];
            }
            for (k, p) in pairs.iter().enumerate() {
                ix[p.0] = s[k];
                iy[p.1] = s[k];
            }
            acc += x.get(&ix) * y.get(&iy);
        }
        out.set(&o, acc);
    }
    out
}

pub fn loop_kruskal(m: &KruskalModel) -> DenseTensor {
    let shape = m.shape();
    let mut out = DenseTensor::zeros(&shape);
    for idx in indices(&shape) {
        let mut acc = 0.0;
        for r in 0..m.rank() {
            let mut p = m.weights[r];
            for (n, &i) in idx.iter().enumerate() {
                p *= m.factors[n][(i, r)];
            }
            acc += p;
        }
        out.set(&idx, acc);
    }
    out
}

/// Block-circulant matrix of the frontal faces: block `(i, j)` is face
/// `(i − j) mod K`.
pub fn block_circulant(x: &DenseTensor) -> Mat {
    let (n1, n2, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Mat::from_fn(n1 * k, n2 * k, |r, c| {
        let (bi, i) = (r / n1, r % n1);
        let (bj, j) = (c / n2, c % n2);
        x.get(&[i, j, (bi + k - bj) % k])
    })
}

/// Stacks the frontal faces vertically.
pub fn unfold_faces(x: &DenseTensor) -> Mat {
    let (n1, n2, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Mat::from_fn(n1 * k, n2, |r, c| x.get(&[r % n1, c, r / n1]))
}

pub fn small_shape(r: &mut ChaCha8Rng, order: usize) -> Vec<usize> {
    (0..order).map(|_| r.random_range(1..=4)).collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    rng(seed)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
    let mut g = Mat::zeros(x.nrows(), x.ncols());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}
