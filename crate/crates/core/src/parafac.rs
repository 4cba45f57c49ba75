//! Constrained PARAFAC by hierarchical alternating least squares.
//!
//! During a fit every mode holds a variable matrix `V_n` with unit-norm
//! columns and the atom scales live in a nonnegative weight vector. A mode
//! may carry an operator `K_n`, in which case its effective factor is
//! `K_n V_n`. Penalties act on the unit columns of `V_n`:
//!
//! `½‖X − [[w; K_1 V_1, …, K_N V_N]]‖² + Σ_n Σ_r π_n(v_{n,r})`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{khatri_rao, pinv, sym_eigen, Mat, Vector};
use crate::penalties::{bic_with, polar_projection, BicForm, FitReport, Penalty};
use crate::tensor::{DenseTensor, KruskalModel};

/// Penalties and structural constraints for one mode.
#[derive(Debug, Clone, Default)]
pub struct ModeSpec {
    pub penalties: Vec<Penalty>,
    pub nonnegative: bool,
    pub orthogonal: bool,
    /// linear map applied to the mode variable (e.g. a lead field)
    pub operator: Option<Mat>,
}

impl ModeSpec {
    pub fn free() -> Self {
        Self::default()
    }

    pub fn nonnegative() -> Self {
        Self {
            nonnegative: true,
            ..Self::default()
        }
    }

    /// Orthogonal and nonnegative: at most one positive entry per row.
    pub fn onn() -> Self {
        Self {
            nonnegative: true,
            orthogonal: true,
            ..Self::default()
        }
    }

    pub fn orthogonal() -> Self {
        Self {
            orthogonal: true,
            ..Self::default()
        }
    }

    pub fn with_penalty(mut self, p: Penalty) -> Self {
        self.penalties.push(p);
        self
    }

    pub fn with_operator(mut self, k: Mat) -> Self {
        self.operator = Some(k);
        self
    }
}

/// Per-mode constraint sets.
#[derive(Debug, Clone)]
pub struct ModeConstraints {
    pub modes: Vec<ModeSpec>,
}

impl ModeConstraints {
    pub fn unconstrained(order: usize) -> Self {
        Self {
            modes: vec![ModeSpec::free(); order],
        }
    }

    pub fn nonnegative(order: usize) -> Self {
        Self {
            modes: vec![ModeSpec::nonnegative(); order],
        }
    }

    pub fn new(modes: Vec<ModeSpec>) -> Self {
        Self { modes }
    }
}

/// Fit settings.
#[derive(Debug, Clone, Serialize)]
pub struct ParafacConfig {
    pub max_sweeps: usize,
    pub tol: f64,
    /// additional random initializations besides the SVD start
    pub restarts: usize,
    pub seed: u64,
    pub bic_form: BicForm,
}

impl Default for ParafacConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            tol: 1e-8,
            restarts: 0,
            seed: 0,
            bic_form: BicForm::Scaled,
        }
    }
}

/// A fitted model. `model` holds the effective factors (operators applied),
/// `variables` the unit-column mode variables.
#[derive(Debug, Clone)]
pub struct ParafacFit {
    pub model: KruskalModel,
    pub variables: Vec<Mat>,
    pub report: FitReport,
    /// rank exceeds the numerical rank of some unfolding
    pub rank_flagged: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct ModePlan {
    pub(crate) l1: f64,
    pub(crate) omega: Option<Mat>,
    pub(crate) omega_norm: f64,
    pub(crate) nonneg: bool,
    pub(crate) ortho: bool,
    pub(crate) op: Option<Mat>,
    pub(crate) op_norm2: f64,
}

impl ModePlan {
    pub(crate) fn from_spec(spec: &ModeSpec, rows: usize, rank: usize) -> Result<Self> {
        let mut l1 = 0.0;
        let mut omega: Option<Mat> = None;
        let mut nonneg = spec.nonnegative;
        let mut ortho = spec.orthogonal;
        let vars = match &spec.operator {
            Some(k) => {
                if k.nrows() != rows {
                    return shape_err(format!(
                        "operator has {} rows but the mode has extent {rows}",
                        k.nrows()
                    ));
                }
                k.ncols()
            }
            None => rows,
        };
        for p in &spec.penalties {
            p.validate()?;
            match p {
                Penalty::Nonnegativity => nonneg = true,
                Penalty::OrthogonalColumns => ortho = true,
                Penalty::Tnn { .. } => {
                    return arg_err("nuclear-norm penalties do not apply to single signatures")
                }
                Penalty::L1 { lambda } => l1 += lambda,
                Penalty::SmoothLasso { l1: a, .. } => l1 += a,
                Penalty::SmoothQuadratic { .. } => {}
            }
            if let Some((lambda, l)) = p.quadratic_part() {
                if l.ncols() != vars {
                    return shape_err(format!(
                        "smoother has {} columns, mode variable has {vars} rows",
                        l.ncols()
                    ));
                }
                let add = l.transpose() * l * (2.0 * lambda);
                omega = Some(match omega {
                    Some(o) => o + add,
                    None => add,
                });
            }
        }
        if ortho && rank > vars {
            return arg_err(format!(
                "orthogonal columns need rank ≤ {vars}, got {rank}"
            ));
        }
        let omega_norm = omega
            .as_ref()
            .map(|o| sym_eigen(o).0.amax())
            .unwrap_or(0.0);
        let op_norm2 = spec
            .operator
            .as_ref()
            .map(|k| sym_eigen(&(k.transpose() * k)).0.amax())
            .unwrap_or(1.0);
        Ok(Self {
            l1,
            omega,
            omega_norm,
            nonneg,
            ortho,
            op: spec.operator.clone(),
            op_norm2,
        })
    }

    fn block(&self) -> bool {
        self.ortho || self.op.is_some()
    }

    pub(crate) fn penalty(&self, v: &Mat) -> f64 {
        let mut p = 0.0;
        if self.l1 > 0.0 {
            p += self.l1 * v.iter().map(|x| x.abs()).sum::<f64>();
        }
        if let Some(o) = &self.omega {
            p += 0.5 * (v.transpose() * o * v).trace();
        }
        p
    }

    fn column_penalty(&self, f: &Vector) -> f64 {
        let mut p = 0.0;
        if self.l1 > 0.0 {
            p += self.l1 * f.iter().map(|x| x.abs()).sum::<f64>();
        }
        if let Some(o) = &self.omega {
            p += 0.5 * f.dot(&(o * f));
        }
        p
    }

    fn effective(&self, v: &Mat) -> Mat {
        match &self.op {
            Some(k) => k * v,
            None => v.clone(),
        }
    }

    /// Shrinks by `t·l1` and maps onto the feasible set of unit columns.
    pub(crate) fn project(&self, z: &Mat, t: f64) -> Mat {
        let thr = t * self.l1;
        let shrunk = if self.nonneg {
            z.map(|v| (v - thr).max(0.0))
        } else if thr > 0.0 {
            z.map(|v| crate::linalg::soft_threshold(v, thr))
        } else {
            z.clone()
        };
        if self.ortho && self.nonneg {
            onn_project(&shrunk, z)
        } else if self.ortho {
            polar_projection(&shrunk)
        } else {
            let mut out = shrunk;
            for r in 0..out.ncols() {
                let col = out.column(r).clone_owned();
                let f = normalize_or_coordinate(&col, &z.column(r).clone_owned(), self.nonneg, None);
                out.set_column(r, &f);
            }
            out
        }
    }
}

/// Unit vector along `v`, or the best single coordinate of `fallback` when
/// `v` vanishes.
fn normalize_or_coordinate(v: &Vector, fallback: &Vector, nonneg: bool, mask: Option<&[bool]>) -> Vector {
    let n = v.norm();
    if n > 0.0 {
        return v / n;
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    for i in 0..fallback.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let s = if nonneg { fallback[i] } else { fallback[i].abs() };
        if s > best.0 {
            best = (s, i);
        }
    }
    let mut out = Vector::zeros(v.len());
    if best.0 > f64::NEG_INFINITY {
        out[best.1] = if !nonneg && fallback[best.1] < 0.0 { -1.0 } else { 1.0 };
    }
    out
}

/// Heuristic projection onto `{V ≥ 0, VᵀV = I}`: each row keeps its largest
/// positive entry, an empty column claims its best row from a column that can
/// spare one, then columns are normalized.
pub(crate) fn onn_project(z: &Mat, fallback: &Mat) -> Mat {
    let (n, r) = z.shape();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let mut best = (0.0, None);
        for c in 0..r {
            if z[(i, c)] > best.0 {
                best = (z[(i, c)], Some(c));
            }
        }
        owner[i] = best.1;
    }
    let mut out = Mat::zeros(n, r);
    for i in 0..n {
        if let Some(c) = owner[i] {
            out[(i, c)] = z[(i, c)];
        }
    }
    for c in 0..r {
        if owner.iter().any(|o| *o == Some(c)) {
            continue;
        }
        let mut counts = vec![0usize; r];
        for o in owner.iter().flatten() {
            counts[*o] += 1;
        }
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            let spare = match owner[i] {
                None => true,
                Some(o) => counts[o] >= 2,
            };
            if spare && best.is_none_or(|(b, _)| fallback[(i, c)] > b) {
                best = Some((fallback[(i, c)], i));
            }
        }
        if let Some((_, i)) = best {
            if let Some(o) = owner[i] {
                out[(i, o)] = 0.0;
            }
            owner[i] = Some(c);
            out[(i, c)] = 1.0;
        }
    }
    for c in 0..r {
        let norm = out.column(c).norm();
        if norm > 0.0 {
            out.column_mut(c).scale_mut(1.0 / norm);
        }
    }
    out
}

/// Maximizes `⟨g, f⟩₊² / (2γ) − π(f)` over unit `f` (nonnegative and
/// restricted to `mask` when requested). Starts from `f0` and never returns a
/// worse point.
fn sphere_maximize(g: &Vector, gamma: f64, f0: &Vector, plan: &ModePlan, mask: Option<&[bool]>) -> Vector {
    let h = |f: &Vector| {
        let c = g.dot(f).max(0.0);
        c * c / (2.0 * gamma) - plan.column_penalty(f)
    };
    let map = |z: &Vector, t: f64| -> Vector {
        let thr = t * plan.l1;
        let mut s = z.clone();
        for i in 0..s.len() {
            s[i] = if mask.is_some_and(|m| !m[i]) {
                0.0
            } else if plan.nonneg {
                (s[i] - thr).max(0.0)
            } else {
                crate::linalg::soft_threshold(s[i], thr)
            };
        }
        normalize_or_coordinate(&s, z, plan.nonneg, mask)
    };
    let gn = g.norm();
    let mut f = f0.clone();
    if gn == 0.0 {
        return f;
    }
    let mut hf = h(&f);
    let cand = map(&(g * (gn / gamma)), 1.0);
    let hc = h(&cand);
    if hc > hf || f.norm() == 0.0 {
        f = cand;
        hf = hc;
    }
    match &plan.omega {
        None => {
            for _ in 0..200 {
                let c = g.dot(&f) / gamma;
                if c <= 0.0 {
                    break;
                }
                let next = map(&(g * c), 1.0);
                let hn = h(&next);
                if hn <= hf {
                    break;
                }
                let gain = hn - hf;
                f = next;
                hf = hn;
                if gain <= 1e-15 * hf.abs().max(1e-300) {
                    break;
                }
            }
        }
        Some(o) => {
            let lip = gn * gn / gamma + plan.omega_norm;
            let mut t = 1.0 / lip;
            for _ in 0..500 {
                let grad = g * (g.dot(&f).max(0.0) / gamma) - o * &f;
                let mut accepted = false;
                for _ in 0..50 {
                    let cand = map(&(&f + &grad * t), t);
                    let hc = h(&cand);
                    if hc > hf {
                        let gain = hc - hf;
                        f = cand;
                        hf = hc;
                        t *= 2.0;
                        accepted = gain > 1e-15 * hf.abs().max(1e-300);
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
    f
}

pub(crate) struct Problem {
    unf: Vec<Mat>,
    x2: f64,
    shape: Vec<usize>,
    pub(crate) plans: Vec<ModePlan>,
    rank: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct State {
    pub(crate) vars: Vec<Mat>,
    pub(crate) w: Vector,
}

fn hadamard_except(grams: &[Mat], skip: Option<usize>, rank: usize) -> Mat {
    let mut q = Mat::from_element(rank, rank, 1.0);
    for (m, g) in grams.iter().enumerate() {
        if Some(m) != skip {
            q.component_mul_assign(g);
        }
    }
    q
}

impl Problem {
    pub(crate) fn new(x: &DenseTensor, rank: usize, constraints: &ModeConstraints) -> Result<Self> {
        if rank == 0 {
            return arg_err("rank must be at least 1");
        }
        if x.order() < 2 {
            return arg_err("PARAFAC needs a tensor of order ≥ 2");
        }
        if constraints.modes.len() != x.order() {
            return shape_err(format!(
                "{} mode constraints for an order-{} tensor",
                constraints.modes.len(),
                x.order()
            ));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("tensor has non-finite entries".into()));
        }
        let plans = constraints
            .modes
            .iter()
            .zip(x.shape())
            .map(|(s, &d)| ModePlan::from_spec(s, d, rank))
            .collect::<Result<Vec<_>>>()?;
        let unf = (0..x.order()).map(|n| x.unfold(n)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            unf,
            x2: x.frobenius_sq(),
            shape: x.shape().to_vec(),
            plans,
            rank,
        })
    }

    fn order(&self) -> usize {
        self.shape.len()
    }

    fn effective(&self, st: &State) -> Vec<Mat> {
        st.vars
            .iter()
            .zip(&self.plans)
            .map(|(v, p)| p.effective(v))
            .collect()
    }

    fn mttkrp(&self, effs: &[Mat], n: usize) -> Mat {
        let others: Vec<&Mat> = (0..self.order()).filter(|&m| m != n).map(|m| &effs[m]).collect();
        &self.unf[n] * khatri_rao(&others)
    }

    /// Objective plus the pieces needed for the weight update.
    fn objective_parts(&self, st: &State) -> (f64, Vector, Mat) {
        let effs = self.effective(st);
        let last = self.order() - 1;
        let m = self.mttkrp(&effs, last);
        let b = Vector::from_iterator(self.rank, (0..self.rank).map(|r| effs[last].column(r).dot(&m.column(r))));
        let grams: Vec<Mat> = effs.iter().map(|e| e.transpose() * e).collect();
        let q = hadamard_except(&grams, None, self.rank);
        let obj = self.objective_from(st, &b, &q);
        (obj, b, q)
    }

    fn objective_from(&self, st: &State, b: &Vector, q: &Mat) -> f64 {
        let pen: f64 = st.vars.iter().zip(&self.plans).map(|(v, p)| p.penalty(v)).sum();
        0.5 * self.x2 - st.w.dot(b) + 0.5 * st.w.dot(&(q * &st.w)) + pen
    }

    pub(crate) fn objective(&self, st: &State) -> f64 {
        self.objective_parts(st).0
    }

    fn update_weights(st: &mut State, b: &Vector, q: &Mat, passes: usize) {
        let r = st.w.len();
        for _ in 0..passes {
            for k in 0..r {
                if q[(k, k)] <= 0.0 {
                    continue;
                }
                let mut s = b[k];
                for j in 0..r {
                    if j != k {
                        s -= q[(k, j)] * st.w[j];
                    }
                }
                st.w[k] = (s / q[(k, k)]).max(0.0);
            }
        }
    }

    fn column_update(&self, n: usize, m: &Mat, q: &Mat, st: &mut State, r: usize, mask: Option<&[bool]>, warnings: &mut Vec<String>) {
        let gamma = q[(r, r)];
        if gamma <= 0.0 {
            return;
        }
        let v = &st.vars[n];
        let mut g = m.column(r).clone_owned();
        for s in 0..self.rank {
            if s != r && st.w[s] != 0.0 {
                g.axpy(-st.w[s] * q[(s, r)], &v.column(s), 1.0);
            }
        }
        let f0 = v.column(r).clone_owned();
        let f = if g.norm() == 0.0 {
            warnings.push(format!("mode {n} column {r}: zero residual direction"));
            f0
        } else {
            sphere_maximize(&g, gamma, &f0, &self.plans[n], mask)
        };
        st.w[r] = g.dot(&f).max(0.0) / gamma;
        st.vars[n].set_column(r, &f);
    }

    /// Projected-gradient steps on the whole mode variable.
    fn block_update(&self, n: usize, m: &Mat, q: &Mat, st: &mut State) {
        let plan = &self.plans[n];
        let p = q.component_mul(&(&st.w * st.w.transpose()));
        let mw = m * Mat::from_diagonal(&st.w);
        let loss = |v: &Mat| {
            let e = plan.effective(v);
            0.5 * (e.transpose() * &e).component_mul(&p).sum() - e.component_mul(&mw).sum() + plan.penalty(v)
        };
        let p_norm = sym_eigen(&p).0.amax();
        let lip = (p_norm * plan.op_norm2 + plan.omega_norm).max(1e-300);
        let mut v = st.vars[n].clone();
        let mut cur = loss(&v);
        for _ in 0..10 {
            let e = plan.effective(&v);
            let ge = &e * &p - &mw;
            let mut grad = match &plan.op {
                Some(k) => k.transpose() * ge,
                None => ge,
            };
            if let Some(o) = &plan.omega {
                grad += o * &v;
            }
            let mut t = 64.0 / lip;
            let mut accepted = false;
            while t >= 1e-8 / lip {
                let cand = plan.project(&(&v - &grad * t), t);
                let lc = loss(&cand);
                if lc < cur - 1e-15 * cur.abs() {
                    v = cand;
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
        st.vars[n] = v;
    }

    fn sweep(&self, st: &mut State, warnings: &mut Vec<String>) -> f64 {
        let n_modes = self.order();
        let mut effs = self.effective(st);
        let mut grams: Vec<Mat> = effs.iter().map(|e| e.transpose() * e).collect();
        let mut last_m = None;
        for n in 0..n_modes {
            let m = self.mttkrp(&effs, n);
            let q = hadamard_except(&grams, Some(n), self.rank);
            if self.plans[n].block() {
                self.block_update(n, &m, &q, st);
            } else {
                for r in 0..self.rank {
                    self.column_update(n, &m, &q, st, r, None, warnings);
                }
            }
            effs[n] = self.plans[n].effective(&st.vars[n]);
            grams[n] = effs[n].transpose() * &effs[n];
            if n == n_modes - 1 {
                last_m = Some(m);
            }
        }
        let m = last_m.expect("at least one mode");
        let last = n_modes - 1;
        let b = Vector::from_iterator(self.rank, (0..self.rank).map(|r| effs[last].column(r).dot(&m.column(r))));
        let q = hadamard_except(&grams, None, self.rank);
        Self::update_weights(st, &b, &q, 3);
        self.objective_from(st, &b, &q)
    }

    fn project_init(&self, n: usize, raw: &Mat) -> Mat {
        let plan = &self.plans[n];
        let z = if plan.nonneg { raw.abs() } else { raw.clone() };
        plan.project(&z, 0.0)
    }

    pub(crate) fn init_svd(&self, rng: &mut ChaCha8Rng) -> State {
        let mut vars = Vec::with_capacity(self.order());
        for n in 0..self.order() {
            let g = &self.unf[n] * self.unf[n].transpose();
            let (_, vecs) = sym_eigen(&g);
            let rows = self.shape[n];
            let mut u = Mat::zeros(rows, self.rank);
            for r in 0..self.rank {
                if r < rows {
                    u.set_column(r, &vecs.column(r));
                } else {
                    for i in 0..rows {
                        u[(i, r)] = StandardNormal.sample(rng);
                    }
                }
            }
            let raw = match &self.plans[n].op {
                Some(k) => k.transpose() * u,
                None => u,
            };
            vars.push(self.project_init(n, &raw));
        }
        self.with_fitted_weights(vars)
    }

    pub(crate) fn init_random(&self, rng: &mut ChaCha8Rng) -> State {
        let vars = (0..self.order())
            .map(|n| {
                let rows = self.plans[n].op.as_ref().map_or(self.shape[n], |k| k.ncols());
                let raw = Mat::from_fn(rows, self.rank, |_, _| StandardNormal.sample(rng));
                self.project_init(n, &raw)
            })
            .collect();
        self.with_fitted_weights(vars)
    }

    pub(crate) fn with_fitted_weights(&self, vars: Vec<Mat>) -> State {
        let mut st = State {
            vars,
            w: Vector::zeros(self.rank),
        };
        let (_, b, q) = self.objective_parts(&st);
        Self::update_weights(&mut st, &b, &q, 50);
        st
    }

    fn unfolding_ranks(&self) -> Vec<usize> {
        self.unf
            .iter()
            .map(|u| {
                let vals = sym_eigen(&(u * u.transpose())).0;
                let top = vals.max().max(0.0);
                vals.iter().filter(|&&v| v > 1e-20 * top && top > 0.0).count()
            })
            .collect()
    }

    /// Runs HALS sweeps from `st` until convergence.
    pub(crate) fn run(&self, mut st: State, cfg: &ParafacConfig) -> Result<(State, Vec<f64>, bool, Vec<String>)> {
        let mut warnings = Vec::new();
        let mut prev = self.objective(&st);
        let mut trace = vec![prev];
        let floor = 1e-12 * self.x2.max(1e-300);
        let mut converged = false;
        for sweep in 1..=cfg.max_sweeps {
            let obj = self.sweep(&mut st, &mut warnings);
            if !obj.is_finite() {
                return Err(Error::Numerical(format!("objective became non-finite at sweep {sweep}")));
            }
            if obj > prev + 1e-10 * prev.abs() + floor {
                return Err(Error::Numerical(format!(
                    "objective increased from {prev:e} to {obj:e} at sweep {sweep}"
                )));
            }
            trace.push(obj);
            let change = (prev - obj).abs();
            prev = obj;
            if change <= cfg.tol * obj.abs() || obj.abs() <= floor * 1e-6 {
                converged = true;
                break;
            }
        }
        Ok((st, trace, converged, warnings))
    }

    pub(crate) fn finish(&self, st: State, trace: Vec<f64>, converged: bool, mut warnings: Vec<String>, cfg: &ParafacConfig, x: &DenseTensor) -> Result<ParafacFit> {
        let effs = self.effective(&st);
        let mut model = KruskalModel::with_weights(effs, st.w.clone())?;
        model.normalized = self.plans.iter().skip(1).all(|p| p.op.is_none());
        let resid = x.sub(&model.reconstruct())?.frobenius_sq();
        let ranks = self.unfolding_ranks();
        let rank_flagged = ranks.iter().any(|&r| self.rank > r);
        if rank_flagged {
            warnings.push(format!("rank {} exceeds an unfolding rank {ranks:?}", self.rank));
        }
        let dof = (self.rank * (self.shape.iter().sum::<usize>() + 1 - self.order())) as f64;
        let n = x.len().max(1);
        Ok(ParafacFit {
            report: FitReport {
                residual_norm2: resid,
                dof,
                bic: bic_with(cfg.bic_form, resid, dof, n)?,
                hyperparameters: vec![("rank".into(), self.rank as f64)],
                iterations: trace.len() - 1,
                converged,
                objective_trace: trace,
                warnings,
            },
            model,
            variables: st.vars,
            rank_flagged,
        })
    }
}

/// Fits `X ≈ [[w; factors]]` under the given constraints.
pub fn fit_parafac(x: &DenseTensor, rank: usize, constraints: &ModeConstraints, cfg: &ParafacConfig) -> Result<ParafacFit> {
    let problem = Problem::new(x, rank, constraints)?;
    let runs: Vec<Result<(State, Vec<f64>, bool, Vec<String>)>> = (0..=cfg.restarts)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            let start = if k == 0 {
                problem.init_svd(&mut rng)
            } else {
                problem.init_random(&mut rng)
            };
            problem.run(start, cfg)
        })
        .collect();
    let mut best: Option<(State, Vec<f64>, bool, Vec<String>)> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(r) => {
                let better = best
                    .as_ref()
                    .is_none_or(|b| r.1.last().unwrap() < b.1.last().unwrap());
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((st, trace, conv, warn)) => problem.finish(st, trace, conv, warn, cfg, x),
        None => Err(first_err.expect("at least one run")),
    }
}

/// One HALS update of column `r` of factor `mode`, all else fixed. The column
/// is returned in the model's own scaling (other factors and weights as given).
pub fn hals_update_column(x: &DenseTensor, model: &KruskalModel, constraints: &ModeConstraints, mode: usize, r: usize) -> Result<Vector> {
    if mode >= model.order() || r >= model.rank() {
        return arg_err(format!("mode {mode} / column {r} out of range"));
    }
    if model.shape() != x.shape() {
        return shape_err("model and tensor shapes differ");
    }
    let problem = Problem::new(x, model.rank(), constraints)?;
    if problem.plans[mode].op.is_some() {
        return arg_err("column updates are not defined for operator modes");
    }
    let mut unit = model.clone();
    unit.normalize(true);
    let mut st = State {
        vars: unit.factors.clone(),
        w: unit.weights.clone(),
    };
    let effs = problem.effective(&st);
    let grams: Vec<Mat> = effs.iter().map(|e| e.transpose() * e).collect();
    let m = problem.mttkrp(&effs, mode);
    let q = hadamard_except(&grams, Some(mode), model.rank());
    let plan = &problem.plans[mode];
    let mask: Option<Vec<bool>> = if plan.ortho && plan.nonneg {
        let v = &st.vars[mode];
        Some((0..v.nrows()).map(|i| (0..v.ncols()).all(|c| c == r || v[(i, c)] <= 0.0)).collect())
    } else {
        None
    };
    let mut warnings = Vec::new();
    problem.column_update(mode, &m, &q, &mut st, r, mask.as_deref(), &mut warnings);
    for w in &warnings {
        log::warn!("{w}");
    }
    let scaled = st.vars[mode].column(r) * st.w[r];
    let mut denom = model.weights[r];
    for (n, f) in model.factors.iter().enumerate() {
        if n != mode {
            denom *= f.column(r).norm();
        }
    }
    if denom == 0.0 {
        return Err(Error::Numerical("atom has zero scale outside the updated mode".into()));
    }
    Ok(scaled / denom)
}

/// `½‖X − [[model]]‖² + Σ_n Σ_r π_n(column)` evaluated on the stored factors.
pub fn penalized_objective(x: &DenseTensor, model: &KruskalModel, constraints: &ModeConstraints) -> Result<f64> {
    let problem = Problem::new(x, model.rank().max(1), constraints)?;
    let resid = x.sub(&model.reconstruct())?.frobenius_sq();
    let pen: f64 = model.factors.iter().zip(&problem.plans).map(|(f, p)| p.penalty(f)).sum();
    Ok(0.5 * resid + pen)
}

/// Gradient of the smooth part of [`penalized_objective`] with respect to
/// column `r` of factor `mode`.
pub fn column_gradient(x: &DenseTensor, model: &KruskalModel, constraints: &ModeConstraints, mode: usize, r: usize) -> Result<Vector> {
    if mode >= model.order() || r >= model.rank() {
        return arg_err(format!("mode {mode} / column {r} out of range"));
    }
    let problem = Problem::new(x, model.rank(), constraints)?;
    let grams: Vec<Mat> = model.factors.iter().map(|f| f.transpose() * f).collect();
    let m = problem.mttkrp(&model.factors, mode);
    let q = hadamard_except(&grams, Some(mode), model.rank());
    let f = &model.factors[mode];
    let w = &model.weights;
    let mut g = -(m.column(r) * w[r]);
    for s in 0..model.rank() {
        g.axpy(w[r] * w[s] * q[(s, r)], &f.column(s), 1.0);
    }
    if let Some(o) = &problem.plans[mode].omega {
        g += o * f.column(r);
    }
    Ok(g)
}

/// `1 − ‖X − X̂‖²/‖X‖²`, clipped at 0 from below.
pub fn explained_variance(x: &DenseTensor, model: &KruskalModel) -> Result<f64> {
    let x2 = x.frobenius_sq();
    if x2 == 0.0 {
        return arg_err("explained variance of a zero tensor is undefined");
    }
    let r2 = x.sub(&model.reconstruct())?.frobenius_sq();
    Ok((1.0 - r2 / x2).clamp(0.0, 1.0))
}

/// Core consistency: `100·(1 − ‖G − I‖²/R)` with `G` the least-squares Tucker
/// core given the model's factors (weights absorbed). Rank 1 gives 100.
pub fn corcondia(x: &DenseTensor, model: &KruskalModel) -> Result<f64> {
    let r = model.rank();
    if model.shape() != x.shape() {
        return shape_err("model and tensor shapes differ");
    }
    if r == 0 {
        return arg_err("corcondia needs rank ≥ 1");
    }
    if r == 1 {
        return Ok(100.0);
    }
    let factors = model.absorbed_factors();
    let mut core = x.clone();
    for (n, f) in factors.iter().enumerate() {
        let (p, deficient) = pinv(f, 1e-12);
        if deficient {
            log::warn!("corcondia: factor {n} is rank deficient; using its pseudo-inverse");
        }
        core = core.mode_product(&p, n)?;
    }
    let mut dev = 0.0;
    for (k, v) in core.data().iter().enumerate() {
        let mut idx = k;
        let mut diag = true;
        let first = idx % r;
        for _ in 0..core.order() {
            if idx % r != first {
                diag = false;
            }
            idx /= r;
        }
        let target = if diag { 1.0 } else { 0.0 };
        dev += (v - target).powi(2);
    }
    Ok(100.0 * (1.0 - dev / r as f64))
}

/// Rank-selection settings.
#[derive(Debug, Clone)]
pub struct RankSelectConfig {
    pub threshold: f64,
    /// minimum rank-1 explained variance to trust a rank-1 answer
    pub min_explained: f64,
    /// minimum explained-variance gain over rank `R−1` for rank `R` to count
    pub min_gain: f64,
    pub parafac: ParafacConfig,
}

impl Default for RankSelectConfig {
    fn default() -> Self {
        Self {
            threshold: 85.0,
            min_explained: 0.5,
            min_gain: 0.01,
            parafac: ParafacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankRow {
    pub rank: usize,
    pub corcondia: f64,
    pub explained_variance: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankSelection {
    pub rank: usize,
    pub low_confidence: bool,
    pub table: Vec<RankRow>,
}

/// Largest rank whose core consistency reaches the threshold and whose atom
/// adds at least `min_gain` explained variance over the previous rank.
///
/// For three-way least-squares fits the core consistency equals 100 at any
/// stationary point with `R ≤ 3`, so the variance gain is what separates the
/// low ranks. Rank 1 always passes; it is flagged low-confidence when it
/// explains less than `min_explained` of the variance.
pub fn select_rank(x: &DenseTensor, r_max: usize, constraints: &ModeConstraints, cfg: &RankSelectConfig) -> Result<RankSelection> {
    if r_max == 0 {
        return arg_err("r_max must be at least 1");
    }
    let rows: Vec<Result<RankRow>> = (1..=r_max)
        .into_par_iter()
        .map(|r| {
            let fit = fit_parafac(x, r, constraints, &cfg.parafac)?;
            Ok(RankRow {
                rank: r,
                corcondia: corcondia(x, &fit.model)?,
                explained_variance: explained_variance(x, &fit.model)?,
                objective: *fit.report.objective_trace.last().unwrap_or(&f64::NAN),
            })
        })
        .collect();
    let table = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let passing: Vec<&RankRow> = table
        .iter()
        .enumerate()
        .filter(|(k, row)| {
            row.corcondia >= cfg.threshold
                && (*k == 0 || row.explained_variance - table[k - 1].explained_variance >= cfg.min_gain)
        })
        .map(|(_, row)| row)
        .collect();
    let chosen = passing
        .iter()
        .max_by(|a, b| {
            a.rank
                .cmp(&b.rank)
                .then(a.explained_variance.total_cmp(&b.explained_variance))
        })
        .map(|row| row.rank)
        .unwrap_or(1);
    let low_confidence = chosen == 1 && table[0].explained_variance < cfg.min_explained;
    Ok(RankSelection {
        rank: chosen,
        low_confidence,
        table,
    })
}
