//! Granger causality as tensor regression.
//!
//! A connectivity tensor `A` is `I × I × lags`; entry `(i, j, l)` is the
//! influence of series `j` on series `i` at lag `l + 1`. A lagged system
//! holds the targets `B_t` (`I × T`) and the lagged data `𝓑`
//! (`lags × I × T`), so that `B_t ≈ A •{(1,1),(2,0)} 𝓑`.

use std::io::Write;

use nalgebra::SVD;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{congruence, frob2, kron, pinv, sym_eigen, Mat, Vector};
use crate::parafac::{fit_parafac, ModeConstraints, ModePlan, ModeSpec, ParafacConfig};
use crate::penalties::{admm_pls, bic_with, AdmmConfig, BicForm, FitReport, Penalty};
use crate::talgebra::{matvec, t_pinv_shrunk, t_product, tplz, unmatvec};
use crate::tensor::{contract, DenseTensor};

#[derive(Debug, Clone)]
pub struct LaggedSystem {
    /// `I × T` targets
    pub target: Mat,
    /// `lags × I × T`; slice `l` is the series shifted by `l + 1` samples
    pub lagged: DenseTensor,
    pub lags: usize,
}

impl LaggedSystem {
    pub fn n_series(&self) -> usize {
        self.target.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.target.ncols()
    }

    /// Lag slice `l` as an `I × T` matrix.
    pub fn lag_matrix(&self, l: usize) -> Mat {
        let (n, t) = self.target.shape();
        Mat::from_fn(n, t, |i, k| self.lagged.get(&[l, i, k]))
    }

    /// Regression design `T × (I·lags)`; column `j + I·l` is series `j` at lag `l + 1`.
    pub fn design(&self) -> Mat {
        let (n, t) = self.target.shape();
        Mat::from_fn(t, n * self.lags, |k, c| self.lagged.get(&[c / n, c % n, k]))
    }
}

/// Subtracts each row's mean.
pub fn demean(b: &Mat) -> Mat {
    let mut out = b.clone();
    for mut row in out.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    out
}

/// Splits `I × (T + lags)` series into targets (the last `T` samples) and
/// their lagged copies.
pub fn build_lagged(series: &Mat, lags: usize) -> Result<LaggedSystem> {
    let (n, total) = series.shape();
    if lags == 0 {
        return arg_err("at least one lag is required");
    }
    if lags >= total {
        return arg_err(format!("{lags} lags need more than {total} samples"));
    }
    let t = total - lags;
    let target = series.columns(lags, t).into_owned();
    let lagged = DenseTensor::from_fn(&[lags, n, t], |idx| series[(idx[1], idx[2] + lags - idx[0] - 1)]);
    Ok(LaggedSystem { target, lagged, lags })
}

/// `A •{(1,1),(2,0)} 𝓑`: the one-step prediction of every target column.
pub fn predict(a: &DenseTensor, sys: &LaggedSystem) -> Result<Mat> {
    check_connectivity(a, sys.n_series(), sys.lags)?;
    let out = contract(a, &sys.lagged, &[(1, 1), (2, 0)])?;
    out.to_matrix()
}

/// `‖B_t − Â‖² / ‖B_t‖²` for the one-step prediction `Â`.
pub fn relative_prediction_error(a: &DenseTensor, sys: &LaggedSystem) -> Result<f64> {
    let pred = predict(a, sys)?;
    let denom = frob2(&sys.target);
    if denom == 0.0 {
        return arg_err("targets are identically zero");
    }
    Ok(frob2(&(&sys.target - pred)) / denom)
}

fn check_connectivity(a: &DenseTensor, n: usize, lags: usize) -> Result<()> {
    if a.shape() != [n, n, lags] {
        return shape_err(format!(
            "connectivity tensor {:?} does not match {n} series and {lags} lags",
            a.shape()
        ));
    }
    Ok(())
}

fn connectivity_from_stacked(x: &Mat, n: usize, lags: usize) -> DenseTensor {
    DenseTensor::from_fn(&[n, n, lags], |idx| x[(idx[1] + n * idx[2], idx[0])])
}

#[derive(Debug, Clone, Serialize)]
pub struct MarFit {
    #[serde(skip)]
    pub connectivity: DenseTensor,
    pub report: FitReport,
}

/// Lifts a node-level smoother to the `(series, lag)` coefficient layout.
fn lift_penalty(p: &Penalty, n: usize, lags: usize) -> Result<Penalty> {
    let lift = |l: &Mat| -> Result<Mat> {
        if l.ncols() == n * lags {
            Ok(l.clone())
        } else if l.ncols() == n {
            Ok(kron(&Mat::identity(lags, lags), l))
        } else {
            shape_err(format!(
                "smoother has {} columns; expected {n} or {}",
                l.ncols(),
                n * lags
            ))
        }
    };
    Ok(match p {
        Penalty::SmoothQuadratic { lambda, smoother } => Penalty::SmoothQuadratic {
            lambda: *lambda,
            smoother: lift(smoother)?,
        },
        Penalty::SmoothLasso { l1, smooth, smoother } => Penalty::SmoothLasso {
            l1: *l1,
            smooth: *smooth,
            smoother: lift(smoother)?,
        },
        other => other.clone(),
    })
}

/// Minimizes `‖B_t − A • 𝓑‖² + Σ π(A)` on the unfolded regression.
///
/// Smoothers with `I` columns act on the sender index within every lag.
pub fn mar_tensor_fit(sys: &LaggedSystem, penalties: &[Penalty], cfg: &AdmmConfig) -> Result<MarFit> {
    let (n, lags) = (sys.n_series(), sys.lags);
    let pens: Vec<Penalty> = penalties
        .iter()
        .map(|p| lift_penalty(p, n, lags).map(|q| q.scaled(0.5)))
        .collect::<Result<_>>()?;
    let sol = admm_pls(&sys.design(), &sys.target.transpose(), &pens, cfg)?;
    let mut report = sol.report;
    report.hyperparameters = penalties.iter().flat_map(|p| p.hyperparameters()).collect();
    Ok(MarFit {
        connectivity: connectivity_from_stacked(&sol.x, n, lags),
        report,
    })
}

/// Covariance tensor `I × I × (lags + 1)` with face `m` equal to
/// `(1/T) Σ_t b_{t−m} b_tᵀ`.
pub fn sample_cov_tensor(sys: &LaggedSystem) -> DenseTensor {
    let (n, t) = sys.target.shape();
    let scale = 1.0 / t.max(1) as f64;
    let mut faces = Vec::with_capacity(sys.lags + 1);
    faces.push(&sys.target * sys.target.transpose() * scale);
    for l in 0..sys.lags {
        faces.push(sys.lag_matrix(l) * sys.target.transpose() * scale);
    }
    DenseTensor::from_faces(&faces).unwrap_or_else(|_| DenseTensor::zeros(&[n, n, sys.lags + 1]))
}

fn split_cov(r: &DenseTensor) -> Result<(DenseTensor, DenseTensor)> {
    if r.order() != 3 || r.shape()[0] != r.shape()[1] || r.shape()[2] < 2 {
        return shape_err(format!(
            "covariance tensor must be I × I × (lags + 1) with lags ≥ 1, got {:?}",
            r.shape()
        ));
    }
    let depth = r.shape()[2];
    Ok((r.slice_mode(2, 0..depth - 1)?, r.slice_mode(2, 1..depth)?))
}

fn transpose_faces(x: &DenseTensor) -> Result<DenseTensor> {
    let faces: Vec<Mat> = (0..x.shape()[2])
        .map(|k| x.face(k).map(|f| f.transpose()))
        .collect::<Result<_>>()?;
    DenseTensor::from_faces(&faces)
}

/// Yule-Walker solution `MatVec(Aᵀ) = tplz(𝓡₁)⁻¹ MatVec(𝓡₂)`; fails when the
/// block-Toeplitz matrix is numerically singular.
pub fn levinson_naive(r: &DenseTensor) -> Result<DenseTensor> {
    let (r1, r2) = split_cov(r)?;
    let lags = r1.shape()[2];
    let t = tplz(&r1)?;
    let sv = SVD::new(t.clone(), false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-12 * smax) {
        return Err(Error::Numerical(format!(
            "block-Toeplitz covariance is singular (condition {:e})",
            smax / smin
        )));
    }
    let sol = t
        .lu()
        .solve(&matvec(&r2)?)
        .ok_or_else(|| Error::Numerical("block-Toeplitz solve failed".into()))?;
    transpose_faces(&unmatvec(&sol, lags)?)
}

/// Same system as [`levinson_naive`], solved with the Moore-Penrose
/// pseudo-inverse instead of failing.
pub fn levinson_pinv(r: &DenseTensor) -> Result<DenseTensor> {
    let (r1, r2) = split_cov(r)?;
    let lags = r1.shape()[2];
    let (p, _) = pinv(&tplz(&r1)?, 1e-12);
    transpose_faces(&unmatvec(&(p * matvec(&r2)?), lags)?)
}

/// t-SVD regularized estimate `V *t ρ⁺(D) *t Uᵀ *t 𝓡₂` with Fourier singular
/// values of `𝓡₁` soft-thresholded by `lambda`.
pub fn levinson_tnn(r: &DenseTensor, lambda: f64) -> Result<DenseTensor> {
    let (r1, r2) = split_cov(r)?;
    let p = t_pinv_shrunk(&r1, lambda, 1e-12)?;
    transpose_faces(&t_product(&p, &r2)?)
}

/// GC-PARAFAC settings. The receiver, sender and lag factors carry their own
/// constraints and smooth-lasso penalties.
#[derive(Debug, Clone)]
pub struct GcParafacConfig {
    pub receiver: ModeSpec,
    pub sender: ModeSpec,
    pub lag: ModeSpec,
    pub max_sweeps: usize,
    pub tol: f64,
    /// tiny ridge used by the initial unfolded estimate, relative to the
    /// mean design variance
    pub init_ridge: f64,
    /// extra random starts for the PARAFAC fit of the initial estimate
    pub init_restarts: usize,
    pub seed: u64,
    pub bic_form: BicForm,
}

impl Default for GcParafacConfig {
    fn default() -> Self {
        Self {
            receiver: ModeSpec::onn(),
            sender: ModeSpec::onn(),
            lag: ModeSpec::free(),
            max_sweeps: 500,
            tol: 1e-8,
            init_ridge: 1e-6,
            init_restarts: 4,
            seed: 0,
            bic_form: BicForm::default(),
        }
    }
}

impl GcParafacConfig {
    /// Orthogonal-nonnegative spatial factors with smooth-lasso penalties
    /// `(l1, smooth)` for receiver, sender and lag.
    pub fn smooth_lasso(node_laplacian: &Mat, lag_laplacian: &Mat, lambdas: [f64; 6]) -> Self {
        let mut cfg = Self::default();
        let pen = |a: f64, b: f64, l: &Mat| Penalty::smooth_lasso(a, b, l.clone());
        cfg.receiver = ModeSpec::onn().with_penalty(pen(lambdas[0], lambdas[1], node_laplacian));
        cfg.sender = ModeSpec::onn().with_penalty(pen(lambdas[2], lambdas[3], node_laplacian));
        cfg.lag = ModeSpec::free().with_penalty(pen(lambdas[4], lambdas[5], lag_laplacian));
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct GcParafacFit {
    /// `I × R`, unit columns
    pub receiver: Mat,
    /// `I × R`, unit columns
    pub sender: Mat,
    /// `lags × R`, unit columns
    pub lag: Mat,
    pub weights: Vector,
    pub connectivity: DenseTensor,
    pub report: FitReport,
    /// atom pairs whose product congruence exceeds 0.98
    pub collinear: Vec<(usize, usize)>,
}

struct GcProblem<'a> {
    y: &'a Mat,
    lag_mats: Vec<Mat>,
    /// `B_l B_kᵀ` for every lag pair, indexed `l * lags + k`
    lag_grams: Vec<Mat>,
    plans: [ModePlan; 3],
    rank: usize,
}

#[derive(Clone)]
struct GcState {
    /// receiver, sender, lag
    vars: [Mat; 3],
    w: Vector,
}

impl<'a> GcProblem<'a> {
    fn new(sys: &'a LaggedSystem, cfg: &GcParafacConfig, rank: usize) -> Result<Self> {
        let (n, lags) = (sys.n_series(), sys.lags);
        let plans = [
            ModePlan::from_spec(&cfg.receiver, n, rank)?,
            ModePlan::from_spec(&cfg.sender, n, rank)?,
            ModePlan::from_spec(&cfg.lag, lags, rank)?,
        ];
        if plans.iter().any(|p| p.op.is_some()) {
            return arg_err("GC-PARAFAC modes do not take operators");
        }
        let lag_mats: Vec<Mat> = (0..lags).map(|l| sys.lag_matrix(l)).collect();
        let lag_grams = (0..lags * lags)
            .map(|c| &lag_mats[c / lags] * lag_mats[c % lags].transpose())
            .collect();
        Ok(Self {
            y: &sys.target,
            lag_mats,
            lag_grams,
            plans,
            rank,
        })
    }

    /// `Z (R × T)` with `Z[r, :] = Σ_l τ(l, r) s_rᵀ B_l`.
    fn drive(&self, sender: &Mat, lag: &Mat) -> Mat {
        let t = self.y.ncols();
        let mut z = Mat::zeros(self.rank, t);
        let sb: Vec<Mat> = self.lag_mats.iter().map(|b| sender.transpose() * b).collect();
        for (l, m) in sb.iter().enumerate() {
            for r in 0..self.rank {
                let c = lag[(l, r)];
                if c != 0.0 {
                    let add = m.row(r) * c;
                    let mut row = z.row_mut(r);
                    row += add;
                }
            }
        }
        z
    }

    fn prediction(&self, st: &GcState) -> Mat {
        let z = self.drive(&st.vars[1], &st.vars[2]);
        &st.vars[0] * Mat::from_diagonal(&st.w) * z
    }

    fn penalty(&self, st: &GcState) -> f64 {
        (0..3).map(|m| self.plans[m].penalty(&st.vars[m])).sum()
    }

    fn objective(&self, st: &GcState) -> f64 {
        0.5 * frob2(&(self.y - self.prediction(st))) + self.penalty(st)
    }

    fn update_weights(&self, st: &mut GcState, passes: usize) {
        let z = self.drive(&st.vars[1], &st.vars[2]);
        let rv = &st.vars[0];
        let q = (rv.transpose() * rv).component_mul(&(&z * z.transpose()));
        let b = (rv.transpose() * self.y * z.transpose()).diagonal();
        for _ in 0..passes {
            for k in 0..self.rank {
                if q[(k, k)] <= 0.0 {
                    continue;
                }
                let mut s = b[k];
                for j in 0..self.rank {
                    if j != k {
                        s -= q[(k, j)] * st.w[j];
                    }
                }
                st.w[k] = (s / q[(k, k)]).max(0.0);
            }
        }
    }

    /// Gradient of the data term with respect to mode `m` and a Lipschitz
    /// estimate for it.
    fn gradient(&self, st: &GcState, m: usize) -> (Mat, f64) {
        let [rv, sv, lv] = &st.vars;
        match m {
            0 => {
                let c = Mat::from_diagonal(&st.w) * self.drive(sv, lv);
                let cc = &c * c.transpose();
                let g = rv * &cc - self.y * c.transpose();
                (g, sym_eigen(&cc).0.amax())
            }
            1 => {
                let e = self.prediction(st) - self.y;
                let n = sv.nrows();
                let mut g = Mat::zeros(n, self.rank);
                let mut lip = 0.0;
                for r in 0..self.rank {
                    let lags = self.lag_mats.len();
                    let mut u = Mat::zeros(n, self.y.ncols());
                    let mut uu = Mat::zeros(n, n);
                    for (l, b) in self.lag_mats.iter().enumerate() {
                        u += b * lv[(l, r)];
                        for k in 0..lags {
                            uu += &self.lag_grams[l * lags + k] * (lv[(l, r)] * lv[(k, r)]);
                        }
                    }
                    let er = e.transpose() * rv.column(r);
                    g.set_column(r, &(&u * er * st.w[r]));
                    lip += st.w[r] * st.w[r] * rv.column(r).norm_squared() * sym_eigen(&uu).0.amax();
                }
                (g, lip)
            }
            _ => {
                let e = self.prediction(st) - self.y;
                let lags = self.lag_mats.len();
                let mut g = Mat::zeros(lags, self.rank);
                let mut lip: f64 = 0.0;
                for r in 0..self.rank {
                    let er = e.transpose() * rv.column(r);
                    let feats: Vec<Vector> = self
                        .lag_mats
                        .iter()
                        .map(|b| b.transpose() * sv.column(r))
                        .collect();
                    let mut gram = Mat::zeros(lags, lags);
                    for l in 0..lags {
                        g[(l, r)] = st.w[r] * feats[l].dot(&er);
                        for k in 0..lags {
                            gram[(l, k)] = feats[l].dot(&feats[k]);
                        }
                    }
                    lip += st.w[r] * st.w[r] * rv.column(r).norm_squared() * sym_eigen(&gram).0.amax();
                }
                (g, lip)
            }
        }
    }

    fn block_update(&self, st: &mut GcState, m: usize) {
        let plan = &self.plans[m];
        let mut cur = self.objective(st);
        for _ in 0..3 {
            let (mut grad, lip) = self.gradient(st, m);
            if let Some(o) = &plan.omega {
                grad += o * &st.vars[m];
            }
            let lip = (lip + plan.omega_norm).max(1e-300);
            let mut t = 2.0 / lip;
            let mut accepted = false;
            while t >= 1e-6 / lip {
                let mut cand = st.clone();
                cand.vars[m] = plan.project(&(&st.vars[m] - &grad * t), t);
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
}

/// Fits `A = Σ_r w_r m_r ∘ s_r ∘ τ_r` (receiver, sender, lag) by minimizing
/// `½‖B_t − A • 𝓑‖² + π(M_r) + π(M_s) + π(T)`. Sweeps update senders,
/// receivers, lag profiles, then the weights.
pub fn gc_parafac(sys: &LaggedSystem, rank: usize, cfg: &GcParafacConfig) -> Result<GcParafacFit> {
    if rank == 0 {
        return arg_err("rank must be at least 1");
    }
    let (n, lags) = (sys.n_series(), sys.lags);
    let problem = GcProblem::new(sys, cfg, rank)?;

    let design = sys.design();
    let mut gram = design.transpose() * &design;
    let ridge = cfg.init_ridge * gram.trace() / gram.nrows() as f64;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge.max(1e-300);
    }
    let stacked = crate::linalg::solve_spd(&gram, &(design.transpose() * sys.target.transpose()))?;
    let a0 = connectivity_from_stacked(&stacked, n, lags);
    let structural = |m: &ModeSpec| ModeSpec {
        penalties: Vec::new(),
        ..m.clone()
    };
    let init_cons = ModeConstraints::new(vec![structural(&cfg.receiver), structural(&cfg.sender), structural(&cfg.lag)]);
    let init_cfg = ParafacConfig {
        max_sweeps: 200,
        restarts: cfg.init_restarts,
        seed: cfg.seed,
        ..ParafacConfig::default()
    };
    let init = fit_parafac(&a0, rank, &init_cons, &init_cfg)?;
    let vars: [Mat; 3] = [
        init.variables[0].clone(),
        init.variables[1].clone(),
        init.variables[2].clone(),
    ];

    let mut st = GcState {
        vars,
        w: init.model.weights.clone(),
    };
    problem.update_weights(&mut st, 50);

    let mut prev = problem.objective(&st);
    let mut trace = vec![prev];
    let mut converged = false;
    let floor = 1e-12 * frob2(&sys.target).max(1e-300);
    for sweep in 1..=cfg.max_sweeps {
        for m in [1, 0, 2] {
            problem.block_update(&mut st, m);
        }
        problem.update_weights(&mut st, 3);
        let obj = problem.objective(&st);
        if !obj.is_finite() {
            return Err(Error::Numerical(format!("objective became non-finite at sweep {sweep}")));
        }
        if obj > prev + 1e-10 * prev.abs() + floor {
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

    let [receiver, sender, lag] = st.vars.clone();
    let connectivity = DenseTensor::from_fn(&[n, n, lags], |idx| {
        (0..rank)
            .map(|r| st.w[r] * receiver[(idx[0], r)] * sender[(idx[1], r)] * lag[(idx[2], r)])
            .sum()
    });
    let mut collinear = Vec::new();
    for a in 0..rank {
        for b in a + 1..rank {
            let c = [&receiver, &sender, &lag]
                .iter()
                .map(|f| congruence(f.column(a).as_slice(), f.column(b).as_slice()))
                .product::<f64>();
            if c.abs() > 0.98 {
                collinear.push((a, b));
            }
        }
    }
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("stopped after {} sweeps", cfg.max_sweeps));
    }
    if !collinear.is_empty() {
        warnings.push(format!("collinear atom pairs {collinear:?}"));
    }
    let resid = frob2(&(&sys.target - problem.prediction(&st)));
    let dof = ((2 * n + lags) * rank) as f64;
    let mut hyper = vec![("rank".to_string(), rank as f64)];
    for spec in [&cfg.receiver, &cfg.sender, &cfg.lag] {
        hyper.extend(spec.penalties.iter().flat_map(|p| p.hyperparameters()));
    }
    Ok(GcParafacFit {
        report: FitReport {
            residual_norm2: resid,
            dof,
            bic: bic_with(cfg.bic_form, resid, dof, sys.target.len().max(1))?,
            hyperparameters: hyper,
            iterations: trace.len() - 1,
            converged,
            objective_trace: trace,
            warnings,
        },
        receiver,
        sender,
        lag,
        weights: st.w,
        connectivity,
        collinear,
    })
}

/// Smooth part of the GC-PARAFAC objective (data term plus quadratic
/// penalties) at the given factors, and its gradient with respect to factor
/// `block` (0 receiver, 1 sender, 2 lag).
pub fn gc_parafac_smooth(
    sys: &LaggedSystem,
    cfg: &GcParafacConfig,
    factors: [&Mat; 3],
    weights: &Vector,
    block: usize,
) -> Result<(f64, Mat)> {
    let rank = weights.len();
    if block > 2 {
        return arg_err(format!("block {block} out of range"));
    }
    let (n, lags) = (sys.n_series(), sys.lags);
    let want = [(n, rank), (n, rank), (lags, rank)];
    for (f, w) in factors.iter().zip(want) {
        if f.shape() != w {
            return shape_err(format!("factor is {:?}, expected {w:?}", f.shape()));
        }
    }
    let problem = GcProblem::new(sys, cfg, rank)?;
    let st = GcState {
        vars: [factors[0].clone(), factors[1].clone(), factors[2].clone()],
        w: weights.clone(),
    };
    let mut value = 0.5 * frob2(&(problem.y - problem.prediction(&st)));
    for (plan, v) in problem.plans.iter().zip(&st.vars) {
        if let Some(o) = &plan.omega {
            value += 0.5 * (v.transpose() * o * v).trace();
        }
    }
    let (mut g, _) = problem.gradient(&st, block);
    if let Some(o) = &problem.plans[block].omega {
        g += o * &st.vars[block];
    }
    Ok((value, g))
}

/// Pairwise bivariate Granger tests. Matrices are indexed `(target, source)`.
#[derive(Debug, Clone)]
pub struct BivariateGc {
    /// `ln(RSS_restricted / RSS_full)`
    pub statistic: Mat,
    pub f_stat: Mat,
    pub p_value: Mat,
    /// Bonferroni-adjusted p-values
    pub p_adjusted: Mat,
    /// `statistic − statisticᵀ`: positive where the source dominates
    pub dominant_flow: Mat,
    pub significant: Vec<Vec<bool>>,
    pub n_tests: usize,
}

fn lagged_columns(x: &[f64], lags: usize, n_eff: usize) -> Mat {
    Mat::from_fn(n_eff, lags, |t, l| x[t + lags - l - 1])
}

fn rss(design: &Mat, y: &Vector) -> Result<(f64, Vector)> {
    let svd = SVD::new(design.clone(), true, true);
    let beta = svd
        .solve(y, 1e-12)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    Ok(((y - design * &beta).norm_squared(), beta))
}

fn with_intercept(blocks: &[&Mat]) -> Mat {
    let rows = blocks[0].nrows();
    let cols = 1 + blocks.iter().map(|b| b.ncols()).sum::<usize>();
    let mut out = Mat::from_element(rows, cols, 1.0);
    let mut c = 1;
    for b in blocks {
        out.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Tests every ordered pair `(source → target)` with an F-test comparing the
/// target's own-lag regression to one that adds the source's lags.
/// Significance uses Bonferroni correction over the `I(I−1)` tests.
pub fn bivariate_gc(series: &Mat, lags: usize, alpha: f64) -> Result<BivariateGc> {
    let (n, total) = series.shape();
    if n < 2 {
        return arg_err("bivariate Granger tests need at least two series");
    }
    if lags == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return arg_err(format!("invalid lags {lags} or level {alpha}"));
    }
    if total <= 3 * lags + 2 {
        return arg_err(format!("{total} samples are too few for {lags} lags"));
    }
    let n_eff = total - lags;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| series.row(i).iter().copied().collect()).collect();
    let own: Vec<Mat> = rows.iter().map(|x| lagged_columns(x, lags, n_eff)).collect();
    let targets: Vec<Vector> = rows.iter().map(|x| Vector::from_column_slice(&x[lags..])).collect();

    let restricted: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let (r, beta) = rss(&with_intercept(&[&own[i]]), &targets[i])?;
            let coeffs: Vec<f64> = beta.iter().skip(1).copied().collect();
            let a = DenseTensor::new(vec![1, 1, lags], coeffs)?;
            let radius = crate::synth::companion_radius(&a)?;
            if radius >= 1.0 {
                return Err(Error::Numerical(format!(
                    "autoregressive fit of series {i} is unstable (radius {radius:.4})"
                )));
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;

    let df1 = lags as f64;
    let df2 = (n_eff - 2 * lags - 1) as f64;
    let dist = FisherSnedecor::new(df1, df2).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let results: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<(f64, f64, f64)> {
            let (full, _) = rss(&with_intercept(&[&own[i], &own[j]]), &targets[i])?;
            let rest = restricted[i];
            let stat = if full > 0.0 { (rest / full).ln() } else { f64::INFINITY };
            let f = ((rest - full).max(0.0) / df1) / (full / df2);
            let p = if f.is_finite() { dist.sf(f) } else { 0.0 };
            Ok((stat, f, p))
        })
        .collect::<Result<_>>()?;

    let n_tests = pairs.len();
    let mut statistic = Mat::zeros(n, n);
    let mut f_stat = Mat::zeros(n, n);
    let mut p_value = Mat::from_element(n, n, 1.0);
    let mut p_adjusted = Mat::from_element(n, n, 1.0);
    let mut significant = vec![vec![false; n]; n];
    for (&(i, j), &(s, f, p)) in pairs.iter().zip(&results) {
        statistic[(i, j)] = s;
        f_stat[(i, j)] = f;
        p_value[(i, j)] = p;
        let adj = (p * n_tests as f64).min(1.0);
        p_adjusted[(i, j)] = adj;
        significant[i][j] = adj <= alpha;
    }
    let dominant_flow = &statistic - statistic.transpose();
    Ok(BivariateGc {
        statistic,
        f_stat,
        p_value,
        p_adjusted,
        dominant_flow,
        significant,
        n_tests,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub lag: usize,
    pub weight: f64,
    pub p_value: Option<f64>,
}

/// Entries of a connectivity tensor with `|A(i, j, l)| > tol` as
/// `j → i` edges at lag `l + 1`.
pub fn connectivity_edges(a: &DenseTensor, tol: f64) -> Result<Vec<Edge>> {
    if a.order() != 3 || a.shape()[0] != a.shape()[1] {
        return shape_err("connectivity tensor must be I × I × lags");
    }
    let (n, lags) = (a.shape()[0], a.shape()[2]);
    let mut out = Vec::new();
    for l in 0..lags {
        for j in 0..n {
            for i in 0..n {
                let w = a.get(&[i, j, l]);
                if w.abs() > tol {
                    out.push(Edge {
                        source: j,
                        target: i,
                        lag: l + 1,
                        weight: w,
                        p_value: None,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Significant pairwise edges, weighted by the Granger statistic. `lag`
/// holds the model order of the test.
pub fn bivariate_edges(gc: &BivariateGc, lags: usize) -> Vec<Edge> {
    let n = gc.statistic.nrows();
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if i != j && gc.significant[i][j] {
                out.push(Edge {
                    source: j,
                    target: i,
                    lag: lags,
                    weight: gc.statistic[(i, j)],
                    p_value: Some(gc.p_adjusted[(i, j)]),
                });
            }
        }
    }
    out
}

pub fn write_edges_csv(w: &mut impl Write, edges: &[Edge]) -> Result<()> {
    writeln!(w, "source,target,lag,weight,p_value")?;
    for e in edges {
        let p = e.p_value.map(|p| format!("{p:e}")).unwrap_or_default();
        writeln!(w, "{},{},{},{:e},{}", e.source, e.target, e.lag, e.weight, p)?;
    }
    Ok(())
}

/// Stable sender→receiver cluster system used by tests and the CLI: atom `r`
/// couples `senders[r]` to `receivers[r]` with lag profile `profiles[r]`, and
/// every node gets the self-coupling `self_ar` at lag 1.
pub fn planted_cluster_mar(
    n: usize,
    senders: &[Vec<usize>],
    receivers: &[Vec<usize>],
    profiles: &[Vec<f64>],
    self_ar: f64,
) -> Result<DenseTensor> {
    if senders.len() != receivers.len() || senders.len() != profiles.len() || profiles.is_empty() {
        return arg_err("one sender set, receiver set and lag profile per atom");
    }
    let lags = profiles[0].len();
    if lags == 0 || profiles.iter().any(|p| p.len() != lags) {
        return arg_err("lag profiles must share a nonzero length");
    }
    let mut a = DenseTensor::zeros(&[n, n, lags]);
    for i in 0..n {
        a.set(&[i, i, 0], self_ar);
    }
    for ((s, r), p) in senders.iter().zip(receivers).zip(profiles) {
        let scale = 1.0 / ((s.len() * r.len()) as f64).sqrt();
        for &j in s {
            for &i in r {
                if i >= n || j >= n {
                    return arg_err(format!("node index out of range for {n} nodes"));
                }
                for (l, &v) in p.iter().enumerate() {
                    let cur = a.get(&[i, j, l]);
                    a.set(&[i, j, l], cur + v * scale);
                }
            }
        }
    }
    Ok(a)
}
