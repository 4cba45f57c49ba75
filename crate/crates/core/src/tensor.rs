//! Dense N-way tensors and the elementary multiway operations.
//!
//! Data are stored column-major: the first index varies fastest. This is the
//! same layout as `nalgebra` matrices, so an order-2 tensor and a `DMatrix`
//! share their buffers element for element.

use std::ops::Range;

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{khatri_rao, Mat};

/// Scalar types a [`DenseTensor`] can hold.
pub trait Element: ComplexField<RealField = f64> + Copy {}

impl<T: ComplexField<RealField = f64> + Copy> Element for T {}

/// Kind of scalar stored, as recorded in the tensor file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    Real,
    Complex,
}

/// Dense N-way array with column-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type ComplexTensor = DenseTensor<Complex64>;

fn column_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = Vec::with_capacity(shape.len());
    let mut acc = 1;
    for &d in shape {
        strides.push(acc);
        acc *= d;
    }
    strides
}

/// Advances a column-major multi-index; returns false after the last index.
fn increment(idx: &mut [usize], shape: &[usize]) -> bool {
    for (i, d) in idx.iter_mut().zip(shape) {
        *i += 1;
        if *i < *d {
            return true;
        }
        *i = 0;
    }
    false
}

impl<T: Element> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if n > 0 {
            let mut idx = vec![0; shape.len()];
            loop {
                data.push(f(&idx));
                if !increment(&mut idx, shape) {
                    break;
                }
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_matrix(m: &DMatrix<T>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn from_vector(v: &DVector<T>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.as_slice().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        column_major_strides(&self.shape)
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut lin = 0;
        let mut stride = 1;
        for (i, d) in idx.iter().zip(&self.shape) {
            debug_assert!(i < d);
            lin += i * stride;
            stride *= d;
        }
        lin
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let lin = self.linear_index(idx);
        self.data[lin] = value;
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: T, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + alpha * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-T::one(), other)
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v.modulus_squared()).sum()
    }

    /// Same data with a different shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Drops all unit extents (keeps at least one axis).
    pub fn squeeze(&self) -> Self {
        let mut shape: Vec<usize> = self.shape.iter().copied().filter(|&d| d != 1).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Self {
            shape,
            data: self.data.clone(),
        }
    }

    /// Inserts a unit extent at `pos`; the data are unchanged.
    pub fn with_singleton(&self, pos: usize) -> Result<Self> {
        if pos > self.order() {
            return arg_err(format!("singleton position {pos} beyond order {}", self.order()));
        }
        let mut shape = self.shape.clone();
        shape.insert(pos, 1);
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Reorders axes so that output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.order();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return arg_err(format!("{perm:?} is not a permutation of 0..{n}"));
        }
        let in_strides = self.strides();
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        if !self.is_empty() {
            let mut idx = vec![0; n];
            loop {
                let lin: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
                data.push(self.data[lin]);
                if !increment(&mut idx, &shape) {
                    break;
                }
            }
        }
        Ok(Self { shape, data })
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return arg_err(format!("mode {mode} invalid for order-{} tensor", self.order()));
        }
        Ok(())
    }

    /// Mode-`mode` matricization: `I_mode × prod(other extents)`, with the
    /// remaining modes in increasing order, first fastest.
    pub fn unfold(&self, mode: usize) -> Result<DMatrix<T>> {
        self.check_mode(mode)?;
        let mut perm = vec![mode];
        perm.extend((0..self.order()).filter(|&m| m != mode));
        let p = self.permute(&perm)?;
        let rows = self.shape[mode];
        let cols: usize = p.shape[1..].iter().product();
        Ok(DMatrix::from_vec(rows, cols, p.data))
    }

    /// Inverse of [`unfold`](Self::unfold).
    pub fn fold(m: &DMatrix<T>, mode: usize, shape: &[usize]) -> Result<Self> {
        if mode >= shape.len() {
            return arg_err(format!("mode {mode} invalid for shape {shape:?}"));
        }
        let rest: usize = shape
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != mode)
            .map(|(_, d)| *d)
            .product();
        if m.nrows() != shape[mode] || m.ncols() != rest {
            return shape_err(format!(
                "cannot fold {}x{} into {:?} along mode {mode}",
                m.nrows(),
                m.ncols(),
                shape
            ));
        }
        let mut perm_shape = vec![shape[mode]];
        perm_shape.extend(
            shape
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != mode)
                .map(|(_, d)| *d),
        );
        let permuted = Self::new(perm_shape, m.as_slice().to_vec())?;
        // axis k of the output lives at position inv[k] of the permuted tensor
        let mut inv = vec![0; shape.len()];
        inv[mode] = 0;
        let mut pos = 1;
        for (k, slot) in inv.iter_mut().enumerate() {
            if k != mode {
                *slot = pos;
                pos += 1;
            }
        }
        permuted.permute(&inv)
    }

    /// Order-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<T>> {
        if self.order() != 2 {
            return shape_err(format!("expected order 2, got shape {:?}", self.shape));
        }
        Ok(DMatrix::from_vec(self.shape[0], self.shape[1], self.data.clone()))
    }

    /// Sub-tensor keeping positions `range` along `mode`.
    pub fn slice_mode(&self, mode: usize, range: Range<usize>) -> Result<Self> {
        self.check_mode(mode)?;
        if range.end > self.shape[mode] || range.start > range.end {
            return arg_err(format!(
                "range {:?} out of bounds for extent {}",
                range, self.shape[mode]
            ));
        }
        let mut shape = self.shape.clone();
        shape[mode] = range.len();
        let start = range.start;
        Ok(Self::from_fn(&shape, |idx| {
            let mut src = idx.to_vec();
            src[mode] += start;
            self.get(&src)
        }))
    }

    /// Frontal face `k` of an order-3 tensor.
    pub fn face(&self, k: usize) -> Result<DMatrix<T>> {
        if self.order() != 3 {
            return shape_err(format!("expected order 3, got shape {:?}", self.shape));
        }
        let (i, j) = (self.shape[0], self.shape[1]);
        if k >= self.shape[2] {
            return arg_err(format!("face {k} out of {}", self.shape[2]));
        }
        let n = i * j;
        Ok(DMatrix::from_column_slice(i, j, &self.data[k * n..(k + 1) * n]))
    }

    /// Stacks equally sized matrices as the frontal faces of an order-3 tensor.
    pub fn from_faces(faces: &[DMatrix<T>]) -> Result<Self> {
        let Some(first) = faces.first() else {
            return arg_err("at least one face required");
        };
        let (i, j) = first.shape();
        let mut data = Vec::with_capacity(i * j * faces.len());
        for f in faces {
            if f.shape() != (i, j) {
                return shape_err("faces differ in shape");
            }
            data.extend_from_slice(f.as_slice());
        }
        Self::new(vec![i, j, faces.len()], data)
    }
}

/// Joins two tensors along `mode`; every other extent must agree.
pub fn concatenate<T: Element>(
    x: &DenseTensor<T>,
    y: &DenseTensor<T>,
    mode: usize,
) -> Result<DenseTensor<T>> {
    if x.order() != y.order() {
        return shape_err(format!(
            "order mismatch: {} vs {}",
            x.order(),
            y.order()
        ));
    }
    x.check_mode(mode)?;
    for m in 0..x.order() {
        if m != mode && x.shape[m] != y.shape[m] {
            return shape_err(format!(
                "extent mismatch on mode {m}: {} vs {}",
                x.shape[m], y.shape[m]
            ));
        }
    }
    let mut shape = x.shape.clone();
    let split = x.shape[mode];
    shape[mode] += y.shape[mode];
    Ok(DenseTensor::from_fn(&shape, |idx| {
        if idx[mode] < split {
            x.get(idx)
        } else {
            let mut j = idx.to_vec();
            j[mode] -= split;
            y.get(&j)
        }
    }))
}

fn contraction_plan(
    xs: &[usize],
    ys: &[usize],
    pairs: &[(usize, usize)],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut x_used = vec![false; xs.len()];
    let mut y_used = vec![false; ys.len()];
    for &(a, b) in pairs {
        if a >= xs.len() || b >= ys.len() {
            return arg_err(format!("contraction pair ({a}, {b}) out of range"));
        }
        if x_used[a] || y_used[b] {
            return arg_err(format!("mode repeated in contraction pair ({a}, {b})"));
        }
        if xs[a] != ys[b] {
            return shape_err(format!(
                "contracted extents differ: mode {a} has {} but mode {b} has {}",
                xs[a], ys[b]
            ));
        }
        x_used[a] = true;
        y_used[b] = true;
    }
    let x_free = (0..xs.len()).filter(|&m| !x_used[m]).collect();
    let y_free = (0..ys.len()).filter(|&m| !y_used[m]).collect();
    Ok((x_free, y_free))
}

/// Tensor contraction over paired modes `(mode of x, mode of y)` (0-based).
///
/// The output holds the free modes of `x` followed by the free modes of `y`.
/// A full contraction yields an order-1 tensor of extent 1.
pub fn contract<T: Element>(
    x: &DenseTensor<T>,
    y: &DenseTensor<T>,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor<T>> {
    let (x_free, y_free) = contraction_plan(&x.shape, &y.shape, pairs)?;
    let xs = x.strides();
    let ys = y.strides();
    let mut out_shape: Vec<usize> = x_free.iter().map(|&m| x.shape[m]).collect();
    out_shape.extend(y_free.iter().map(|&m| y.shape[m]));
    let sum_shape: Vec<usize> = pairs.iter().map(|&(a, _)| x.shape[a]).collect();
    let sum_size: usize = sum_shape.iter().product();
    let nx = x_free.len();
    let mut sum_idx = vec![0; pairs.len()];

    let shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let result = DenseTensor::from_fn(&shape, |out| {
        let mut base_x = 0;
        let mut base_y = 0;
        if !(x_free.is_empty() && y_free.is_empty()) {
            for (k, &m) in x_free.iter().enumerate() {
                base_x += out[k] * xs[m];
            }
            for (k, &m) in y_free.iter().enumerate() {
                base_y += out[nx + k] * ys[m];
            }
        }
        let mut acc = T::zero();
        if sum_size == 0 {
            return acc;
        }
        sum_idx.iter_mut().for_each(|v| *v = 0);
        loop {
            let mut ox = base_x;
            let mut oy = base_y;
            for (k, &(a, b)) in pairs.iter().enumerate() {
                ox += sum_idx[k] * xs[a];
                oy += sum_idx[k] * ys[b];
            }
            acc += x.data[ox] * y.data[oy];
            if !increment(&mut sum_idx, &sum_shape) {
                break;
            }
        }
        acc
    });
    Ok(result)
}

/// Same result as [`contract`], computed by permuting both operands into
/// matrices and calling a dense matrix product.
pub fn contract_unfolded<T: Element>(
    x: &DenseTensor<T>,
    y: &DenseTensor<T>,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor<T>> {
    let (x_free, y_free) = contraction_plan(&x.shape, &y.shape, pairs)?;
    let mut xperm = x_free.clone();
    xperm.extend(pairs.iter().map(|&(a, _)| a));
    let mut yperm: Vec<usize> = pairs.iter().map(|&(_, b)| b).collect();
    yperm.extend(y_free.iter().copied());
    let xp = x.permute(&xperm)?;
    let yp = y.permute(&yperm)?;
    let rows: usize = x_free.iter().map(|&m| x.shape[m]).product();
    let inner: usize = pairs.iter().map(|&(a, _)| x.shape[a]).product();
    let cols: usize = y_free.iter().map(|&m| y.shape[m]).product();
    let xm = DMatrix::from_vec(rows, inner, xp.data);
    let ym = DMatrix::from_vec(inner, cols, yp.data);
    let prod = xm * ym;
    let mut shape: Vec<usize> = x_free.iter().map(|&m| x.shape[m]).collect();
    shape.extend(y_free.iter().map(|&m| y.shape[m]));
    if shape.is_empty() {
        shape.push(1);
    }
    DenseTensor::new(shape, prod.as_slice().to_vec())
}

impl DenseTensor<f64> {
    /// Mode-n product `X ×_n M`: replaces extent `I_n` by `M.nrows()`.
    pub fn mode_product(&self, m: &Mat, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        if m.ncols() != self.shape[mode] {
            return shape_err(format!(
                "mode-{mode} product: matrix has {} columns, extent is {}",
                m.ncols(),
                self.shape[mode]
            ));
        }
        let unf = self.unfold(mode)?;
        let prod = m * unf;
        let mut shape = self.shape.clone();
        shape[mode] = m.nrows();
        Self::fold(&prod, mode, &shape)
    }

    pub fn to_complex(&self) -> ComplexTensor {
        self.map(|v| Complex64::new(v, 0.0))
    }

    /// Inner product `<X, Y>`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

impl ComplexTensor {
    /// Largest absolute imaginary part.
    pub fn max_imag(&self) -> f64 {
        self.data.iter().map(|v| v.im.abs()).fold(0.0, f64::max)
    }

    pub fn real_part(&self) -> DenseTensor<f64> {
        self.map(|v| v.re)
    }
}

/// Atomic (CP) model: factor matrices `I_n × R` plus a length-`R` weight vector.
///
/// Under the normalized convention, every factor except the first has unit-norm
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct KruskalModel {
    pub factors: Vec<Mat>,
    pub weights: DVector<f64>,
    pub normalized: bool,
}

impl KruskalModel {
    /// Model with unit weights; validates that every factor shares its column count.
    pub fn new(factors: Vec<Mat>) -> Result<Self> {
        let rank = factors.first().map(|f| f.ncols()).unwrap_or(0);
        Self::with_weights(factors, DVector::from_element(rank, 1.0))
    }

    pub fn with_weights(factors: Vec<Mat>, weights: DVector<f64>) -> Result<Self> {
        if factors.is_empty() {
            return arg_err("a Kruskal model needs at least one factor");
        }
        let rank = factors[0].ncols();
        if factors.iter().any(|f| f.ncols() != rank) {
            return shape_err("factor matrices have different column counts");
        }
        if weights.len() != rank {
            return shape_err(format!("{} weights for rank {rank}", weights.len()));
        }
        Ok(Self {
            factors,
            weights,
            normalized: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    /// Dense tensor `Σ_r w_r a_r^(1) ∘ … ∘ a_r^(N)`. Rank 0 gives zeros.
    pub fn reconstruct(&self) -> DenseTensor<f64> {
        let shape = self.shape();
        if self.rank() == 0 || shape.iter().any(|&d| d == 0) {
            return DenseTensor::zeros(&shape);
        }
        let weighted = &self.factors[0] * Mat::from_diagonal(&self.weights);
        if self.order() == 1 {
            let v: DVector<f64> = weighted.column_sum();
            return DenseTensor::from_vector(&v);
        }
        let rest: Vec<&Mat> = self.factors[1..].iter().collect();
        let unf = weighted * khatri_rao(&rest).transpose();
        DenseTensor::fold(&unf, 0, &shape).expect("shapes are consistent by construction")
    }

    /// Rescales columns so factors `2..N` have unit norm, moving the scale into
    /// the weights. With `all_modes`, the first factor is normalized too.
    pub fn normalize(&mut self, all_modes: bool) {
        let start = if all_modes { 0 } else { 1 };
        for r in 0..self.rank() {
            for n in start..self.order() {
                let norm = self.factors[n].column(r).norm();
                if norm > 0.0 {
                    self.factors[n].column_mut(r).scale_mut(1.0 / norm);
                    self.weights[r] *= norm;
                }
            }
            if self.weights[r] < 0.0 {
                self.weights[r] = -self.weights[r];
                self.factors[0].column_mut(r).neg_mut();
            }
        }
        self.normalized = true;
    }

    /// Factors with the weights folded into the first one.
    pub fn absorbed_factors(&self) -> Vec<Mat> {
        let mut f = self.factors.clone();
        f[0] = &f[0] * Mat::from_diagonal(&self.weights);
        f
    }
}
