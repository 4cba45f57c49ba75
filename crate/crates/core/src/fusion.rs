//! Multimodal fusion: N-PLS along a shared mode and coupled matrix-tensor
//! factorization with common and modality-specific spatial blocks.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::inverse::eeg_inverse;
use crate::linalg::{congruence, frob2, khatri_rao, pearson, pinv, sym_eigen, Mat, Vector};
use crate::parafac::{fit_parafac, ModeConstraints, ModePlan, ModeSpec, ParafacConfig};
use crate::penalties::{active_set, bic_with, dof_quadratic, grid_points, AdmmConfig, BicForm, FitReport, Penalty, PlsSolution};
use crate::synth::rng;
use crate::tensor::{contract_unfolded, DenseTensor, KruskalModel};

#[derive(Debug, Clone, Serialize)]
pub struct NplsConfig {
    /// shared mode of `X`
    pub x_shared: usize,
    /// shared mode of `Y`
    pub y_shared: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// shuffles per atom for the permutation test; 0 skips it
    pub permutations: usize,
    pub seed: u64,
}

impl Default for NplsConfig {
    fn default() -> Self {
        Self {
            x_shared: 1,
            y_shared: 1,
            max_iter: 500,
            tol: 1e-12,
            permutations: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NplsAtom {
    /// unit loadings of the non-shared modes of `X`, in mode order
    pub x_loadings: Vec<Vector>,
    pub y_loadings: Vec<Vector>,
    /// shared-mode signature of `X`
    pub x_score: Vector,
    pub y_score: Vector,
    /// `x_scoreᵀ y_score / n`
    pub covariance: f64,
    pub correlation: f64,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct NplsFit {
    pub atoms: Vec<NplsAtom>,
    /// `n × R` shared signatures of `X`
    pub t_x: Mat,
    pub t_y: Mat,
    /// least-squares `C` in `t_y ≈ t_x C`
    pub c: Mat,
    pub x_residual: DenseTensor,
    pub y_residual: DenseTensor,
    pub warnings: Vec<String>,
}

/// Best rank-one approximation of `z` by the higher-order power method,
/// started from the leading singular vectors of each unfolding.
fn hopm(z: &DenseTensor, max_iter: usize, tol: f64) -> Result<Vec<Vector>> {
    let order = z.order();
    let mut us: Vec<Vector> = Vec::with_capacity(order);
    for n in 0..order {
        let u = z.unfold(n)?;
        let (vals, vecs) = sym_eigen(&(&u * u.transpose()));
        let top = vals.imax();
        us.push(vecs.column(top).clone_owned());
    }
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        for n in 0..order {
            let mut v = project_except(z, &us, n)?;
            let norm = v.norm();
            if norm == 0.0 {
                return Ok(us);
            }
            v /= norm;
            us[n] = v;
        }
        let val = project_except(z, &us, order - 1)?.dot(&us[order - 1]);
        if (val - prev).abs() <= tol * val.abs().max(1e-300) {
            break;
        }
        prev = val;
    }
    Ok(us)
}

/// `z` contracted with `us[m]` on every mode except `keep`.
fn project_except(z: &DenseTensor, us: &[Vector], keep: usize) -> Result<Vector> {
    let mut t = z.clone();
    for m in (0..z.order()).rev() {
        if m != keep {
            t = t.mode_product(&Mat::from_row_slice(1, us[m].len(), us[m].as_slice()), m)?;
        }
    }
    Ok(Vector::from_column_slice(t.data()))
}

/// Scores of `x` along `shared` for unit loadings on the other modes.
fn scores(x: &DenseTensor, shared: usize, loadings: &[Vector]) -> Result<Vector> {
    let mut us = Vec::with_capacity(x.order());
    let mut it = loadings.iter();
    for m in 0..x.order() {
        if m == shared {
            us.push(Vector::zeros(0));
        } else {
            us.push(it.next().expect("one loading per free mode").clone());
        }
    }
    project_except(x, &us, shared)
}

fn deflate(x: &DenseTensor, shared: usize, loadings: &[Vector], score: &Vector) -> Result<DenseTensor> {
    let mut it = loadings.iter();
    let factors: Vec<Mat> = (0..x.order())
        .map(|m| {
            let v = if m == shared { score } else { it.next().expect("loading") };
            Mat::from_column_slice(v.len(), 1, v.as_slice())
        })
        .collect();
    x.sub(&KruskalModel::new(factors)?.reconstruct())
}

fn permute_mode(x: &DenseTensor, mode: usize, perm: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(x.shape(), |idx| {
        let mut src = idx.to_vec();
        src[mode] = perm[idx[mode]];
        x.get(&src)
    })
}

struct Extracted {
    x_loadings: Vec<Vector>,
    y_loadings: Vec<Vector>,
    x_score: Vector,
    y_score: Vector,
}

fn extract_atom(x: &DenseTensor, y: &DenseTensor, cfg: &NplsConfig) -> Result<Extracted> {
    let z = contract_unfolded(x, y, &[(cfg.x_shared, cfg.y_shared)])?;
    let us = hopm(&z, cfg.max_iter, cfg.tol)?;
    let nx = x.order() - 1;
    let x_loadings = us[..nx].to_vec();
    let y_loadings = us[nx..].to_vec();
    let mut x_score = scores(x, cfg.x_shared, &x_loadings)?;
    let mut y_score = scores(y, cfg.y_shared, &y_loadings)?;
    let mut x_loadings = x_loadings;
    let mut y_loadings = y_loadings;
    // sign convention: positive covariance and positive sum of the first X loading
    if x_loadings[0].sum() < 0.0 {
        x_loadings[0].neg_mut();
        x_score.neg_mut();
    }
    if x_score.dot(&y_score) < 0.0 {
        y_loadings[0].neg_mut();
        y_score.neg_mut();
    }
    Ok(Extracted {
        x_loadings,
        y_loadings,
        x_score,
        y_score,
    })
}

/// Sequential N-PLS: each atom maximizes the covariance of the shared-mode
/// signatures of `X` and `Y` over unit loadings, then both datasets are
/// deflated by the atom's rank-one part.
pub fn npls(x: &DenseTensor, y: &DenseTensor, rank: usize, cfg: &NplsConfig) -> Result<NplsFit> {
    if rank == 0 {
        return arg_err("rank must be at least 1");
    }
    if x.order() < 2 || y.order() < 2 || cfg.x_shared >= x.order() || cfg.y_shared >= y.order() {
        return arg_err("both datasets need a shared mode and at least one other mode");
    }
    let n = x.shape()[cfg.x_shared];
    if y.shape()[cfg.y_shared] != n {
        return shape_err(format!(
            "shared extents differ: {n} and {}",
            y.shape()[cfg.y_shared]
        ));
    }
    let mut xr = x.clone();
    let mut yr = y.clone();
    let z0 = frob2_tensor(&contract_unfolded(x, y, &[(cfg.x_shared, cfg.y_shared)])?);
    let mut atoms = Vec::with_capacity(rank);
    let mut warnings = Vec::new();
    for k in 0..rank {
        let z = contract_unfolded(&xr, &yr, &[(cfg.x_shared, cfg.y_shared)])?;
        if frob2_tensor(&z) <= 1e-24 * z0.max(1e-300) {
            warnings.push(format!("cross-covariance vanished after {k} atoms; stopping"));
            break;
        }
        let e = extract_atom(&xr, &yr, cfg)?;
        let covariance = e.x_score.dot(&e.y_score) / n as f64;
        let correlation = pearson(e.x_score.as_slice(), e.y_score.as_slice());
        let p_value = if cfg.permutations > 0 {
            Some(permutation_p(&xr, &yr, correlation, k, cfg)?)
        } else {
            None
        };
        xr = deflate(&xr, cfg.x_shared, &e.x_loadings, &e.x_score)?;
        yr = deflate(&yr, cfg.y_shared, &e.y_loadings, &e.y_score)?;
        atoms.push(NplsAtom {
            x_loadings: e.x_loadings,
            y_loadings: e.y_loadings,
            x_score: e.x_score,
            y_score: e.y_score,
            covariance,
            correlation,
            p_value,
        });
    }
    let r = atoms.len();
    let t_x = Mat::from_fn(n, r, |i, j| atoms[j].x_score[i]);
    let t_y = Mat::from_fn(n, r, |i, j| atoms[j].y_score[i]);
    let c = pinv(&t_x, 1e-12).0 * &t_y;
    Ok(NplsFit {
        atoms,
        t_x,
        t_y,
        c,
        x_residual: xr,
        y_residual: yr,
        warnings,
    })
}

fn frob2_tensor(t: &DenseTensor) -> f64 {
    t.frobenius_sq()
}

/// Share of shared-mode shuffles of `Y` whose extracted atom correlates at
/// least as strongly as the observed one.
fn permutation_p(x: &DenseTensor, y: &DenseTensor, observed: f64, atom: usize, cfg: &NplsConfig) -> Result<f64> {
    let n = y.shape()[cfg.y_shared];
    let exceed: usize = (0..cfg.permutations)
        .into_par_iter()
        .map(|b| -> Result<usize> {
            let mut perm: Vec<usize> = (0..n).collect();
            let stream = cfg.seed.wrapping_mul(1_000_003).wrapping_add((atom * cfg.permutations + b) as u64);
            perm.shuffle(&mut rng(stream));
            let yp = permute_mode(y, cfg.y_shared, &perm);
            let e = extract_atom(x, &yp, cfg)?;
            let c = pearson(e.x_score.as_slice(), e.y_score.as_slice());
            Ok(usize::from(c >= observed))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok((1 + exceed) as f64 / (1 + cfg.permutations) as f64)
}

/// Column-wise penalized inverse of signature maps: `M_V ≈ K M_G`.
pub fn localize_signatures(m_v: &Mat, lead_field: &Mat, penalties: &[Penalty], cfg: &AdmmConfig) -> Result<PlsSolution> {
    eeg_inverse(m_v, lead_field, penalties, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CmtfRanks {
    pub common: usize,
    pub tensor_only: usize,
    pub matrix_only: usize,
}

#[derive(Debug, Clone)]
pub struct CmtfConfig {
    pub ranks: CmtfRanks,
    /// smooth-lasso `(l1, smooth)` pairs for `M_C`, `M_G`, `M_B`
    pub lambdas: [f64; 6],
    /// spatial smoother; required when a smooth weight is positive
    pub laplacian: Option<Mat>,
    /// matrix-term weight; `None` uses `‖S_T‖² / ‖B‖²`
    pub gamma: Option<f64>,
    pub max_sweeps: usize,
    pub tol: f64,
    /// extra random starts for each single-modality initialization
    pub init_restarts: usize,
    pub seed: u64,
    pub bic_form: BicForm,
}

impl CmtfConfig {
    pub fn new(ranks: CmtfRanks) -> Self {
        Self {
            ranks,
            lambdas: [0.0; 6],
            laplacian: None,
            gamma: None,
            max_sweeps: 500,
            tol: 1e-8,
            init_restarts: 2,
            seed: 0,
            bic_form: BicForm::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoupledModel {
    /// `M_C`, unit nonnegative columns
    pub common: Mat,
    /// `M_G`
    pub tensor_spatial: Mat,
    /// `M_B`
    pub matrix_spatial: Mat,
    /// `T_V`; carries the tensor-side scale
    pub t_v: Mat,
    /// `F_V`, unit nonnegative columns
    pub f_v: Mat,
    /// `T_B`; carries the matrix-side scale
    pub t_b: Mat,
    pub gamma: f64,
}

impl CoupledModel {
    /// `[M_C, M_G]`
    pub fn tensor_block(&self) -> Mat {
        hcat(&self.common, &self.tensor_spatial)
    }

    /// `[M_C, M_B]`
    pub fn matrix_block(&self) -> Mat {
        hcat(&self.common, &self.matrix_spatial)
    }

    pub fn reconstruct_tensor(&self, lead_field: &Mat) -> Result<DenseTensor> {
        Ok(KruskalModel::new(vec![lead_field * self.tensor_block(), self.t_v.clone(), self.f_v.clone()])?.reconstruct())
    }

    pub fn reconstruct_matrix(&self) -> Mat {
        self.matrix_block() * self.t_b.transpose()
    }
}

/// The three BIC values of a fitted coupled model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CmtfBic {
    pub common: f64,
    pub tensor: f64,
    pub matrix: f64,
}

#[derive(Debug, Clone)]
pub struct CmtfFit {
    pub model: CoupledModel,
    pub report: FitReport,
    pub bic: CmtfBic,
}

fn hcat(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

struct CmtfProblem<'a> {
    s: &'a DenseTensor,
    s_unf: [Mat; 3],
    s2: f64,
    b: &'a Mat,
    b2: f64,
    k: &'a Mat,
    ktk: Mat,
    ktk_norm: f64,
    gamma: f64,
    ranks: CmtfRanks,
    /// plans for `M_C`, `M_G`, `M_B`
    plans: [ModePlan; 3],
}

#[derive(Clone)]
struct CmtfState {
    /// `M_C`, `M_G`, `M_B`
    spatial: [Mat; 3],
    t_v: Mat,
    f_v: Mat,
    t_b: Mat,
}

impl CmtfState {
    fn tensor_block(&self) -> Mat {
        hcat(&self.spatial[0], &self.spatial[1])
    }

    fn matrix_block(&self) -> Mat {
        hcat(&self.spatial[0], &self.spatial[2])
    }
}

impl<'a> CmtfProblem<'a> {
    fn new(s_t: &'a DenseTensor, b: &'a Mat, k: &'a Mat, cfg: &CmtfConfig) -> Result<Self> {
        let ranks = cfg.ranks;
        if ranks.common == 0 {
            return arg_err("the common subspace needs at least one atom");
        }
        if s_t.order() != 3 {
            return arg_err("the tensor side must be order 3");
        }
        let nodes = k.ncols();
        if s_t.shape()[0] != k.nrows() {
            return shape_err(format!("tensor has {} channels, lead field {}", s_t.shape()[0], k.nrows()));
        }
        if b.nrows() != nodes {
            return shape_err(format!("matrix has {} rows for {nodes} spatial nodes", b.nrows()));
        }
        if cfg.lambdas.iter().any(|v| !(*v >= 0.0)) {
            return arg_err("penalty weights must be nonnegative");
        }
        let s2 = s_t.frobenius_sq();
        let b2 = frob2(b);
        if b2 == 0.0 || s2 == 0.0 {
            return arg_err("both datasets must be nonzero");
        }
        let gamma = cfg.gamma.unwrap_or(s2 / b2);
        if !(gamma >= 0.0) {
            return arg_err(format!("gamma must be nonnegative, got {gamma}"));
        }
        if ranks.common + ranks.tensor_only > nodes || ranks.common + ranks.matrix_only > nodes {
            return arg_err(format!("orthogonal spatial blocks need at most {nodes} columns"));
        }
        let lap = cfg.laplacian.as_ref();
        let specs = [
            spatial_spec(&cfg.lambdas[0..2], lap, nodes)?,
            spatial_spec(&cfg.lambdas[2..4], lap, nodes)?,
            spatial_spec(&cfg.lambdas[4..6], lap, nodes)?,
        ];
        let plans = [
            ModePlan::from_spec(&specs[0], nodes, ranks.common)?,
            ModePlan::from_spec(&specs[1], nodes, ranks.tensor_only.max(1))?,
            ModePlan::from_spec(&specs[2], nodes, ranks.matrix_only.max(1))?,
        ];
        let ktk = k.transpose() * k;
        Ok(Self {
            s: s_t,
            s_unf: [s_t.unfold(0)?, s_t.unfold(1)?, s_t.unfold(2)?],
            s2,
            b,
            b2,
            k,
            ktk_norm: sym_eigen(&ktk).0.amax(),
            ktk,
            gamma,
            ranks,
            plans,
        })
    }

    /// Gradient of the smooth part with respect to `M_C`, `M_G`, `M_B`.
    fn smooth_gradient(&self, st: &CmtfState) -> [Mat; 3] {
        let rc = self.ranks.common;
        let q = (st.t_v.transpose() * &st.t_v).component_mul(&(st.f_v.transpose() * &st.f_v));
        let m0 = &self.s_unf[0] * khatri_rao(&[&st.t_v, &st.f_v]);
        let g_t = &self.ktk * st.tensor_block() * &q - self.k.transpose() * m0;
        let tbt = st.t_b.transpose() * &st.t_b;
        let g_m = (st.matrix_block() * &tbt - self.b * &st.t_b) * self.gamma;
        let mut grads = [
            g_t.columns(0, rc) + g_m.columns(0, rc),
            g_t.columns(rc, self.ranks.tensor_only).into_owned(),
            g_m.columns(rc, self.ranks.matrix_only).into_owned(),
        ];
        for (i, g) in grads.iter_mut().enumerate() {
            if let Some(o) = &self.plans[i].omega {
                *g += o * &st.spatial[i];
            }
        }
        grads
    }

    fn smooth_value(&self, st: &CmtfState) -> f64 {
        let mut v = 0.5 * self.tensor_resid2(st) + 0.5 * self.gamma * self.matrix_resid2(st);
        for (plan, m) in self.plans.iter().zip(&st.spatial) {
            if let Some(o) = &plan.omega {
                v += 0.5 * (m.transpose() * o * m).trace();
            }
        }
        v
    }
}

impl CmtfProblem<'_> {
    fn tensor_resid2(&self, st: &CmtfState) -> f64 {
        let a = self.k * st.tensor_block();
        let m0 = &self.s_unf[0] * khatri_rao(&[&st.t_v, &st.f_v]);
        let q = (st.t_v.transpose() * &st.t_v).component_mul(&(st.f_v.transpose() * &st.f_v));
        let fit = (a.transpose() * &a).component_mul(&q).sum();
        (self.s2 - 2.0 * a.component_mul(&m0).sum() + fit).max(0.0)
    }

    fn matrix_resid2(&self, st: &CmtfState) -> f64 {
        frob2(&(self.b - st.matrix_block() * st.t_b.transpose()))
    }

    fn penalty(&self, st: &CmtfState) -> f64 {
        (0..3).map(|i| self.plans[i].penalty(&st.spatial[i])).sum()
    }

    fn objective(&self, st: &CmtfState) -> f64 {
        0.5 * self.tensor_resid2(st) + 0.5 * self.gamma * self.matrix_resid2(st) + self.penalty(st)
    }

    /// Projected-gradient steps on all spatial blocks at once.
    fn spatial_update(&self, st: &mut CmtfState) {
        let mut cur = self.objective(st);
        for _ in 0..5 {
            let q = (st.t_v.transpose() * &st.t_v).component_mul(&(st.f_v.transpose() * &st.f_v));
            let tbt = st.t_b.transpose() * &st.t_b;
            let grads = self.smooth_gradient(st);
            let omega = self.plans.iter().map(|p| p.omega_norm).fold(0.0, f64::max);
            let lip = (self.ktk_norm * sym_eigen(&q).0.amax() + self.gamma * sym_eigen(&tbt).0.amax() + omega).max(1e-300);
            let mut t = 2.0 / lip;
            let mut accepted = false;
            while t >= 1e-6 / lip {
                let z: Vec<Mat> = (0..3)
                    .map(|i| {
                        let thr = t * self.plans[i].l1;
                        (&st.spatial[i] - &grads[i] * t).map(|v| (v - thr).max(0.0))
                    })
                    .collect();
                let mut cand = st.clone();
                cand.spatial = coupled_onn_project(&z[0], &z[1], &z[2], self.gamma > 0.0);
                let lc = self.objective(&cand);
                if lc < cur - 1e-15 * cur.abs() {
                    *st = cand;
                    cur = lc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }

    fn update_t_v(&self, st: &mut CmtfState) {
        let a = self.k * st.tensor_block();
        let m1 = &self.s_unf[1] * khatri_rao(&[&a, &st.f_v]);
        let q = (a.transpose() * &a).component_mul(&(st.f_v.transpose() * &st.f_v));
        st.t_v = m1 * pinv(&q, 1e-12).0;
    }

    /// Nonnegative HALS passes on `F_V`, then unit columns with the scale
    /// moved into `T_V`.
    fn update_f_v(&self, st: &mut CmtfState) {
        let a = self.k * st.tensor_block();
        let m2 = &self.s_unf[2] * khatri_rao(&[&a, &st.t_v]);
        let q = (a.transpose() * &a).component_mul(&(st.t_v.transpose() * &st.t_v));
        let r = q.ncols();
        let mut f = st.f_v.clone();
        for _ in 0..20 {
            for c in 0..r {
                if q[(c, c)] <= 0.0 {
                    continue;
                }
                let g = m2.column(c) - &f * q.column(c);
                let col = (f.column(c) + g / q[(c, c)]).map(|v| v.max(0.0));
                f.set_column(c, &col);
            }
        }
        for c in 0..r {
            let n = f.column(c).norm();
            if n > 0.0 {
                f.column_mut(c).scale_mut(1.0 / n);
                st.t_v.column_mut(c).scale_mut(n);
            } else {
                f.set_column(c, &st.f_v.column(c));
                st.t_v.column_mut(c).fill(0.0);
            }
        }
        st.f_v = f;
    }

    fn update_t_b(&self, st: &mut CmtfState) {
        let m = st.matrix_block();
        st.t_b = self.b.transpose() * &m * pinv(&(m.transpose() * &m), 1e-12).0;
    }

    fn sweep(&self, st: &mut CmtfState) -> f64 {
        self.spatial_update(st);
        self.update_t_v(st);
        self.update_f_v(st);
        self.update_t_b(st);
        self.objective(st)
    }
}

/// Projection onto `[M_C, M_G] ≥ 0` and `[M_C, M_B] ≥ 0` with orthonormal
/// columns in each block pair: a row is owned either by one common column or
/// by at most one tensor-only and one matrix-only column, whichever keeps
/// more mass. Empty columns claim a free row; columns are normalized.
fn coupled_onn_project(zc: &Mat, zg: &Mat, zb: &Mat, matrix_counts: bool) -> [Mat; 3] {
    let n = zc.nrows();
    let blocks = [zc, zg, zb];
    let mut out = [
        Mat::zeros(n, zc.ncols()),
        Mat::zeros(n, zg.ncols()),
        Mat::zeros(n, zb.ncols()),
    ];
    let best = |m: &Mat, i: usize| -> Option<(usize, f64)> {
        let mut b: Option<(usize, f64)> = None;
        for c in 0..m.ncols() {
            if m[(i, c)] > 0.0 && b.is_none_or(|(_, v)| m[(i, c)] > v) {
                b = Some((c, m[(i, c)]));
            }
        }
        b
    };
    for i in 0..n {
        let c = best(zc, i);
        let g = best(zg, i);
        let b = best(zb, i);
        let vc = c.map_or(0.0, |x| x.1 * x.1);
        let vg = g.map_or(0.0, |x| x.1 * x.1);
        let vb = if matrix_counts { b.map_or(0.0, |x| x.1 * x.1) } else { 0.0 };
        if c.is_some() && vc >= vg + vb {
            let (col, v) = c.expect("checked");
            out[0][(i, col)] = v;
        } else {
            if let Some((col, v)) = g {
                out[1][(i, col)] = v;
            }
            if let Some((col, v)) = b {
                out[2][(i, col)] = v;
            }
        }
    }
    // conflicts: common vs everything, tensor-only vs common and itself,
    // matrix-only vs common and itself
    let conflicts: [&[usize]; 3] = [&[0, 1, 2], &[0, 1], &[0, 2]];
    for blk in 0..3 {
        for col in 0..out[blk].ncols() {
            if out[blk].column(col).iter().any(|&v| v > 0.0) {
                continue;
            }
            let mut pick: Option<(f64, usize)> = None;
            for i in 0..n {
                let spare = conflicts[blk].iter().all(|&o| {
                    let owners: Vec<usize> = (0..out[o].ncols()).filter(|&c| out[o][(i, c)] > 0.0).collect();
                    owners.iter().all(|&c| out[o].column(c).iter().filter(|&&v| v > 0.0).count() >= 2)
                });
                let score = blocks[blk][(i, col)];
                if spare && pick.is_none_or(|(s, _)| score > s) {
                    pick = Some((score, i));
                }
            }
            if let Some((_, i)) = pick {
                for &o in conflicts[blk] {
                    for c in 0..out[o].ncols() {
                        out[o][(i, c)] = 0.0;
                    }
                }
                out[blk][(i, col)] = 1.0;
            }
        }
    }
    for m in out.iter_mut() {
        for c in 0..m.ncols() {
            let norm = m.column(c).norm();
            if norm > 0.0 {
                m.column_mut(c).scale_mut(1.0 / norm);
            }
        }
    }
    out
}

fn spatial_spec(lambdas: &[f64], laplacian: Option<&Mat>, rows: usize) -> Result<ModeSpec> {
    let (l1, l2) = (lambdas[0], lambdas[1]);
    let mut spec = ModeSpec::onn();
    if l2 > 0.0 {
        let l = laplacian.ok_or_else(|| Error::InvalidArgument("smooth penalty needs a Laplacian".into()))?;
        if l.ncols() != rows {
            return shape_err(format!("Laplacian has {} columns for {rows} spatial nodes", l.ncols()));
        }
        spec = spec.with_penalty(Penalty::smooth_lasso(l1, l2, l.clone()));
    } else if l1 > 0.0 {
        spec = spec.with_penalty(Penalty::l1(l1));
    }
    Ok(spec)
}

/// Coupled factorization `½‖S_T − [[K[M_C, M_G], T_V, F_V]]‖² +
/// γ½‖B − [M_C, M_B] T_Bᵀ‖²` plus smooth-lasso penalties on the spatial
/// blocks, with both `[M_C, M_G]` and `[M_C, M_B]` orthogonal and nonnegative
/// and `F_V ≥ 0`.
pub fn cmtf(s_t: &DenseTensor, b: &Mat, lead_field: &Mat, cfg: &CmtfConfig) -> Result<CmtfFit> {
    let ranks = cfg.ranks;
    let problem = CmtfProblem::new(s_t, b, lead_field, cfg)?;
    let (s2, b2, gamma) = (problem.s2, problem.b2, problem.gamma);
    let rt = ranks.common + ranks.tensor_only;
    let rm = ranks.common + ranks.matrix_only;

    let mut st = initialize(&problem, cfg)?;
    problem.update_t_v(&mut st);
    problem.update_f_v(&mut st);
    problem.update_t_b(&mut st);

    let mut prev = problem.objective(&st);
    let mut trace = vec![prev];
    let mut converged = false;
    let floor = 1e-12 * (s2 + gamma * b2);
    for sweep in 1..=cfg.max_sweeps {
        let obj = problem.sweep(&mut st);
        if !obj.is_finite() {
            return Err(Error::Numerical(format!("objective became non-finite at sweep {sweep}")));
        }
        if obj > prev + 1e-9 * prev.abs() + floor {
            return Err(Error::Divergence {
                iterations: sweep,
                detail: format!("objective increased from {prev:e} to {obj:e}"),
            });
        }
        trace.push(obj);
        let change = prev - obj;
        prev = obj;
        if change <= cfg.tol * obj.abs() {
            converged = true;
            break;
        }
    }

    let r_t = problem.tensor_resid2(&st);
    let r_b = problem.matrix_resid2(&st);
    let bic = coupled_bic(&problem, &st, cfg, r_t, r_b)?;
    let spatial_nnz: usize = st.spatial.iter().map(|m| m.iter().filter(|&&v| v > 0.0).count()).sum();
    let dims = s_t.shape();
    let dof = (spatial_nnz + (dims[1] + dims[2] - 1) * rt + b.ncols() * rm) as f64;
    let n = s_t.len() + b.len();
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("stopped after {} sweeps", cfg.max_sweeps));
    }
    let mut hyper: Vec<(String, f64)> = ["l1_common", "smooth_common", "l1_tensor", "smooth_tensor", "l1_matrix", "smooth_matrix"]
        .iter()
        .zip(cfg.lambdas)
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    hyper.push(("gamma".into(), gamma));
    let resid = r_t + gamma * r_b;
    let model = CoupledModel {
        common: st.spatial[0].clone(),
        tensor_spatial: st.spatial[1].clone(),
        matrix_spatial: st.spatial[2].clone(),
        t_v: st.t_v,
        f_v: st.f_v,
        t_b: st.t_b,
        gamma,
    };
    Ok(CmtfFit {
        model,
        report: FitReport {
            residual_norm2: resid,
            dof,
            bic: bic_with(cfg.bic_form, resid, dof, n)?,
            hyperparameters: hyper,
            iterations: trace.len() - 1,
            converged,
            objective_trace: trace,
            warnings,
        },
        bic,
    })
}

/// Smooth part of the coupled objective (both data terms plus quadratic
/// penalties) at `model`, and its gradients with respect to `M_C`, `M_G` and
/// `M_B`. Uses `model.gamma`.
pub fn cmtf_smooth(s_t: &DenseTensor, b: &Mat, lead_field: &Mat, cfg: &CmtfConfig, model: &CoupledModel) -> Result<(f64, [Mat; 3])> {
    let mut cfg = cfg.clone();
    cfg.gamma = Some(model.gamma);
    let p = CmtfProblem::new(s_t, b, lead_field, &cfg)?;
    let r = cfg.ranks;
    let n = lead_field.ncols();
    let checks = [
        (model.common.shape(), (n, r.common)),
        (model.tensor_spatial.shape(), (n, r.tensor_only)),
        (model.matrix_spatial.shape(), (n, r.matrix_only)),
        (model.t_v.shape(), (s_t.shape()[1], r.common + r.tensor_only)),
        (model.f_v.shape(), (s_t.shape()[2], r.common + r.tensor_only)),
        (model.t_b.shape(), (b.ncols(), r.common + r.matrix_only)),
    ];
    for (got, want) in checks {
        if got != want {
            return shape_err(format!("model block is {got:?}, expected {want:?}"));
        }
    }
    let st = CmtfState {
        spatial: [model.common.clone(), model.tensor_spatial.clone(), model.matrix_spatial.clone()],
        t_v: model.t_v.clone(),
        f_v: model.f_v.clone(),
        t_b: model.t_b.clone(),
    };
    Ok((p.smooth_value(&st), p.smooth_gradient(&st)))
}

/// Independent single-modality fits; the most congruent spatial pairs seed
/// the common block.
fn initialize(p: &CmtfProblem, cfg: &CmtfConfig) -> Result<CmtfState> {
    let r = p.ranks;
    let (rt, rm) = (r.common + r.tensor_only, r.common + r.matrix_only);
    let pcfg = ParafacConfig {
        max_sweeps: 300,
        restarts: cfg.init_restarts,
        seed: cfg.seed,
        ..ParafacConfig::default()
    };
    let tcons = ModeConstraints::new(vec![
        ModeSpec::onn().with_operator(p.k.clone()),
        ModeSpec::free(),
        ModeSpec::nonnegative(),
    ]);
    let tfit = fit_parafac(p.s, rt, &tcons, &pcfg)?;
    let mcons = ModeConstraints::new(vec![ModeSpec::onn(), ModeSpec::free()]);
    let mfit = fit_parafac(&DenseTensor::from_matrix(p.b), rm, &mcons, &pcfg)?;
    let ts = &tfit.variables[0];
    let ms = &mfit.variables[0];

    // with the matrix switched off, pairing by position keeps the tensor side
    // independent of it
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..rt {
        for j in 0..rm {
            let score = if p.gamma > 0.0 {
                congruence(ts.column(i).as_slice(), ms.column(j).as_slice())
            } else {
                f64::from(i == j)
            };
            pairs.push((score, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_t, mut used_m) = (vec![false; rt], vec![false; rm]);
    let mut common = Vec::new();
    for &(_, i, j) in &pairs {
        if common.len() == r.common {
            break;
        }
        if !used_t[i] && !used_m[j] {
            used_t[i] = true;
            used_m[j] = true;
            common.push((i, j));
        }
    }
    let nodes = p.k.ncols();
    let mut zc = Mat::zeros(nodes, r.common);
    for (c, &(i, j)) in common.iter().enumerate() {
        if p.gamma > 0.0 {
            zc.set_column(c, &((ts.column(i) + ms.column(j)) * 0.5));
        } else {
            zc.set_column(c, &ts.column(i));
        }
    }
    let rest_t: Vec<usize> = (0..rt).filter(|&i| !used_t[i]).collect();
    let rest_m: Vec<usize> = (0..rm).filter(|&j| !used_m[j]).collect();
    let zg = Mat::from_fn(nodes, r.tensor_only, |i, c| ts[(i, rest_t[c])]);
    let zb = Mat::from_fn(nodes, r.matrix_only, |i, c| ms[(i, rest_m[c])]);
    let spatial = coupled_onn_project(&zc, &zg, &zb, p.gamma > 0.0);

    let order_t: Vec<usize> = common.iter().map(|x| x.0).chain(rest_t.iter().copied()).collect();
    let order_m: Vec<usize> = common.iter().map(|x| x.1).chain(rest_m.iter().copied()).collect();
    let f_v = Mat::from_fn(p.s.shape()[2], rt, |i, c| tfit.variables[2][(i, order_t[c])]);
    let t_v = Mat::from_fn(p.s.shape()[1], rt, |i, c| tfit.variables[1][(i, order_t[c])] * tfit.model.weights[order_t[c]]);
    let t_b = Mat::from_fn(p.b.ncols(), rm, |i, c| mfit.variables[1][(i, order_m[c])] * mfit.model.weights[order_m[c]]);
    Ok(CmtfState { spatial, t_v, f_v, t_b })
}

/// Degrees of freedom of a spatial block: per column, the smooth-lasso trace
/// formula on the column's active set with the block's design.
fn block_dof(design: &Mat, m: &Mat, plan: &ModePlan) -> Result<f64> {
    let omega = plan.omega.clone().unwrap_or_else(|| Mat::zeros(m.nrows(), m.nrows()));
    let mut dof = 0.0;
    for c in 0..m.ncols() {
        dof += dof_quadratic(design, &active_set(m, c), &omega)?;
    }
    Ok(dof)
}

fn coupled_bic(p: &CmtfProblem, st: &CmtfState, cfg: &CmtfConfig, r_t: f64, r_b: f64) -> Result<CmtfBic> {
    let nodes = p.k.ncols();
    let eye = Mat::identity(nodes, nodes);
    let mut stacked = Mat::zeros(p.k.nrows() + nodes, nodes);
    stacked.rows_mut(0, p.k.nrows()).copy_from(p.k);
    stacked.rows_mut(p.k.nrows(), nodes).copy_from(&(&eye * p.gamma.sqrt()));
    let df_c = block_dof(&stacked, &st.spatial[0], &p.plans[0])?;
    let df_g = block_dof(p.k, &st.spatial[1], &p.plans[1])?;
    let df_b = block_dof(&eye, &st.spatial[2], &p.plans[2])?;
    let (n_v, n_b) = (p.s.len(), p.b.len());
    let _ = p.b2;
    Ok(CmtfBic {
        common: bic_with(cfg.bic_form, r_t + p.gamma * r_b, df_c, n_v + n_b)?,
        tensor: bic_with(cfg.bic_form, r_t, df_g, n_v)?,
        matrix: bic_with(cfg.bic_form, r_b, df_b, n_b)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CmtfGridRow {
    pub lambdas: Vec<f64>,
    pub bic: Option<CmtfBic>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CmtfGridSearch {
    pub rows: Vec<CmtfGridRow>,
    /// lambda vectors minimizing the common, tensor and matrix BIC arrays
    pub best_common: Vec<f64>,
    pub best_tensor: Vec<f64>,
    pub best_matrix: Vec<f64>,
}

/// Evaluates the three coupled BIC arrays over the Cartesian grid of the six
/// smooth-lasso weights and returns each array's minimizer.
pub fn cmtf_bic_grid(s_t: &DenseTensor, b: &Mat, lead_field: &Mat, base: &CmtfConfig, grids: &[Vec<f64>; 6]) -> Result<CmtfGridSearch> {
    if grids.iter().any(|g| g.is_empty()) {
        return arg_err("every grid needs at least one value");
    }
    let points = grid_points(grids.as_slice());
    let rows: Vec<CmtfGridRow> = points
        .par_iter()
        .map(|p| {
            let mut cfg = base.clone();
            cfg.lambdas.copy_from_slice(p);
            match cmtf(s_t, b, lead_field, &cfg) {
                Ok(fit) => CmtfGridRow {
                    lambdas: p.clone(),
                    bic: Some(fit.bic),
                    error: None,
                },
                Err(e) => CmtfGridRow {
                    lambdas: p.clone(),
                    bic: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let pick = |f: fn(&CmtfBic) -> f64| -> Option<Vec<f64>> {
        rows.iter()
            .filter_map(|r| r.bic.as_ref().map(|b| (f(b), &r.lambdas)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, l)| l.clone())
    };
    let best_common = pick(|b| b.common);
    let (Some(best_common), Some(best_tensor), Some(best_matrix)) = (best_common, pick(|b| b.tensor), pick(|b| b.matrix)) else {
        let first = rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::Numerical(format!("every grid point failed; first error: {first}")));
    };
    Ok(CmtfGridSearch {
        rows,
        best_common,
        best_tensor,
        best_matrix,
    })
}

/// Maps values in `(0, 1)` to `ln(p / (1 − p))`.
pub fn logit(m: &Mat) -> Result<Mat> {
    if m.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return arg_err("logit needs entries strictly inside (0, 1)");
    }
    Ok(m.map(|p| (p / (1.0 - p)).ln()))
}
