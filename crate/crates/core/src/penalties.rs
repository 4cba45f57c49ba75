//! Regularizers, proximal maps, the consensus-ADMM penalized least-squares
//! engine, degrees of freedom and BIC scoring.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{frob2, soft_threshold, sym_eigen, Mat, Vector};

/// A regularizer `π(X)` on a `p × q` coefficient matrix. Smoothers act from
/// the left, on the row index of `X`.
#[derive(Debug, Clone, PartialEq)]
pub enum Penalty {
    /// `λ ‖X‖₁`
    L1 { lambda: f64 },
    /// `λ ‖L X‖²`
    SmoothQuadratic { lambda: f64, smoother: Mat },
    /// `λ1 ‖X‖₁ + λ2 ‖L X‖²`
    SmoothLasso { l1: f64, smooth: f64, smoother: Mat },
    /// indicator of `X ≥ 0`
    Nonnegativity,
    /// indicator of `XᵀX = I`
    OrthogonalColumns,
    /// `λ ‖X‖_*` (matrix nuclear norm, the depth-1 tensor nuclear norm)
    Tnn { lambda: f64 },
}

const FEASIBILITY_TOL: f64 = 1e-9;

impl Penalty {
    pub fn l1(lambda: f64) -> Self {
        Penalty::L1 { lambda }
    }

    pub fn smooth(lambda: f64, smoother: Mat) -> Self {
        Penalty::SmoothQuadratic { lambda, smoother }
    }

    pub fn smooth_lasso(l1: f64, smooth: f64, smoother: Mat) -> Self {
        Penalty::SmoothLasso {
            l1,
            smooth,
            smoother,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                arg_err(format!("{name} must be a finite nonnegative number, got {v}"))
            }
        };
        match self {
            Penalty::L1 { lambda } | Penalty::Tnn { lambda } => check("lambda", *lambda),
            Penalty::SmoothQuadratic { lambda, smoother } => {
                check("lambda", *lambda)?;
                check_smoother(smoother)
            }
            Penalty::SmoothLasso {
                l1,
                smooth,
                smoother,
            } => {
                check("lambda1", *l1)?;
                check("lambda2", *smooth)?;
                check_smoother(smoother)
            }
            Penalty::Nonnegativity | Penalty::OrthogonalColumns => Ok(()),
        }
    }

    /// Same penalty with every weight multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Penalty {
        match self {
            Penalty::L1 { lambda } => Penalty::L1 { lambda: lambda * s },
            Penalty::SmoothQuadratic { lambda, smoother } => Penalty::SmoothQuadratic {
                lambda: lambda * s,
                smoother: smoother.clone(),
            },
            Penalty::SmoothLasso {
                l1,
                smooth,
                smoother,
            } => Penalty::SmoothLasso {
                l1: l1 * s,
                smooth: smooth * s,
                smoother: smoother.clone(),
            },
            Penalty::Tnn { lambda } => Penalty::Tnn { lambda: lambda * s },
            other => other.clone(),
        }
    }

    /// Value of the penalty; indicator penalties give 0 or +∞.
    pub fn value(&self, x: &Mat) -> f64 {
        match self {
            Penalty::L1 { lambda } => lambda * l1_norm(x),
            Penalty::SmoothQuadratic { lambda, smoother } => lambda * frob2(&(smoother * x)),
            Penalty::SmoothLasso {
                l1,
                smooth,
                smoother,
            } => l1 * l1_norm(x) + smooth * frob2(&(smoother * x)),
            Penalty::Nonnegativity => {
                if x.iter().all(|&v| v >= -FEASIBILITY_TOL) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Penalty::OrthogonalColumns => {
                let g = x.transpose() * x - Mat::identity(x.ncols(), x.ncols());
                if g.norm() <= 1e-6 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Penalty::Tnn { lambda } => lambda * nuclear_norm(x),
        }
    }

    /// Quadratic part `λ ‖L X‖²`, if any, as `(λ, L)`.
    pub fn quadratic_part(&self) -> Option<(f64, &Mat)> {
        match self {
            Penalty::SmoothQuadratic { lambda, smoother } => Some((*lambda, smoother)),
            Penalty::SmoothLasso {
                smooth, smoother, ..
            } => Some((*smooth, smoother)),
            _ => None,
        }
    }

    /// Non-differentiable part, if any.
    pub fn nonsmooth_part(&self) -> Option<Penalty> {
        match self {
            Penalty::SmoothQuadratic { .. } => None,
            Penalty::SmoothLasso { l1, .. } => Some(Penalty::L1 { lambda: *l1 }),
            other => Some(other.clone()),
        }
    }

    fn is_indicator(&self) -> bool {
        matches!(self, Penalty::Nonnegativity | Penalty::OrthogonalColumns)
    }

    /// Hyperparameters as named values, for reports.
    pub fn hyperparameters(&self) -> Vec<(String, f64)> {
        match self {
            Penalty::L1 { lambda } => vec![("l1".into(), *lambda)],
            Penalty::SmoothQuadratic { lambda, .. } => vec![("smooth".into(), *lambda)],
            Penalty::SmoothLasso { l1, smooth, .. } => {
                vec![("l1".into(), *l1), ("smooth".into(), *smooth)]
            }
            Penalty::Tnn { lambda } => vec![("tnn".into(), *lambda)],
            Penalty::Nonnegativity | Penalty::OrthogonalColumns => vec![],
        }
    }
}

fn check_smoother(l: &Mat) -> Result<()> {
    if l.iter().any(|v| !v.is_finite()) {
        return arg_err("smoother has non-finite entries");
    }
    Ok(())
}

pub fn l1_norm(x: &Mat) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

pub fn nuclear_norm(x: &Mat) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.clone().svd(false, false).singular_values.sum()
}

/// `L = D − W` for a symmetric nonnegative adjacency `W` with zero diagonal.
pub fn graph_laplacian(adjacency: &Mat) -> Result<Mat> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return shape_err("adjacency must be square");
    }
    let scale = adjacency.amax().max(1.0);
    for i in 0..n {
        if adjacency[(i, i)] != 0.0 {
            return arg_err(format!("adjacency has nonzero diagonal at {i}"));
        }
        for j in 0..i {
            if (adjacency[(i, j)] - adjacency[(j, i)]).abs() > 1e-12 * scale {
                return arg_err(format!("adjacency is not symmetric at ({i}, {j})"));
            }
            if adjacency[(i, j)] < 0.0 {
                return arg_err(format!("adjacency has a negative weight at ({i}, {j})"));
            }
        }
    }
    let mut l = -adjacency.clone();
    for i in 0..n {
        l[(i, i)] = adjacency.row(i).sum();
    }
    Ok(l)
}

/// Laplacian of a path graph on `n` nodes.
pub fn path_laplacian(n: usize) -> Mat {
    let mut w = Mat::zeros(n, n);
    for i in 1..n {
        w[(i, i - 1)] = 1.0;
        w[(i - 1, i)] = 1.0;
    }
    graph_laplacian(&w).expect("path adjacency is valid")
}

fn singular_value_threshold(z: &Mat, t: f64) -> Mat {
    if z.is_empty() {
        return z.clone();
    }
    let svd = z.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let s = svd.singular_values.map(|v| (v - t).max(0.0));
    &u * Mat::from_diagonal(&s) * &vt
}

/// Nearest matrix with orthonormal columns (polar factor).
pub fn polar_projection(z: &Mat) -> Mat {
    if z.is_empty() {
        return z.clone();
    }
    let svd = z.clone().svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v_t requested")
}

/// `argmin_X ½‖X − Z‖² + step·π(X)`.
pub fn prox(penalty: &Penalty, z: &Mat, step: f64) -> Result<Mat> {
    if !(step > 0.0 && step.is_finite()) {
        return arg_err(format!("prox step must be positive, got {step}"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("prox input has non-finite entries".into()));
    }
    penalty.validate()?;
    Ok(match penalty {
        Penalty::L1 { lambda } => z.map(|v| soft_threshold(v, step * lambda)),
        Penalty::SmoothQuadratic { lambda, smoother } => {
            check_smoother_cols(smoother, z)?;
            let n = z.nrows();
            let sys = Mat::identity(n, n) + smoother.transpose() * smoother * (2.0 * step * lambda);
            crate::linalg::solve_spd(&sys, z)?
        }
        Penalty::SmoothLasso {
            l1,
            smooth,
            smoother,
        } => {
            check_smoother_cols(smoother, z)?;
            smooth_lasso_prox(z, step * l1, step * smooth, smoother)
        }
        Penalty::Nonnegativity => z.map(|v| v.max(0.0)),
        Penalty::OrthogonalColumns => polar_projection(z),
        Penalty::Tnn { lambda } => singular_value_threshold(z, step * lambda),
    })
}

fn check_smoother_cols(l: &Mat, z: &Mat) -> Result<()> {
    if l.ncols() != z.nrows() {
        return shape_err(format!(
            "smoother has {} columns but the argument has {} rows",
            l.ncols(),
            z.nrows()
        ));
    }
    Ok(())
}

/// `argmin_X ½‖X − Z‖² + a‖X‖₁ + b‖L X‖²` by accelerated proximal gradient.
/// The smooth part is 1-strongly convex, so the constant-momentum scheme
/// converges linearly.
fn smooth_lasso_prox(z: &Mat, a: f64, b: f64, l: &Mat) -> Mat {
    let ltl = l.transpose() * l;
    let lip = 1.0 + 2.0 * b * sym_eigen(&ltl).0.max().max(0.0);
    let q = 1.0 / lip;
    let momentum = (lip.sqrt() - 1.0) / (lip.sqrt() + 1.0);
    let mut x = z.map(|v| soft_threshold(v, a));
    let mut y = x.clone();
    let scale = z.amax().max(1e-300);
    for _ in 0..100_000 {
        let grad = (&y - z) + &ltl * &y * (2.0 * b);
        let next = (&y - grad * q).map(|v| soft_threshold(v, a * q));
        let delta = (&next - &x).amax();
        y = &next + (&next - &x) * momentum;
        x = next;
        if delta <= 1e-15 * scale {
            break;
        }
    }
    x
}

/// Result summary of a penalized fit.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FitReport {
    pub residual_norm2: f64,
    pub dof: f64,
    pub bic: f64,
    pub hyperparameters: Vec<(String, f64)>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Which BIC expression to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum BicForm {
    /// `½‖r‖² + dof·log(n)/n`
    #[default]
    Scaled,
    /// `n·log(‖r‖²/n) + dof·log(n)`
    Classical,
}

/// `½‖r‖² + dof·log(n)/n`.
pub fn bic(residual_norm2: f64, dof: f64, n: usize) -> Result<f64> {
    bic_with(BicForm::Scaled, residual_norm2, dof, n)
}

pub fn bic_with(form: BicForm, residual_norm2: f64, dof: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return arg_err("BIC needs at least one observation");
    }
    let nf = n as f64;
    Ok(match form {
        BicForm::Scaled => 0.5 * residual_norm2 + dof * nf.ln() / nf,
        BicForm::Classical => {
            nf * (residual_norm2.max(f64::MIN_POSITIVE) / nf).ln() + dof * nf.ln()
        }
    })
}

/// Degrees of freedom of the smooth lasso restricted to `active` columns:
/// `tr(A_S (A_Sᵀ A_S + λ2 L_Sᵀ L_S)⁻¹ A_Sᵀ)`.
pub fn dof_smooth_lasso(a: &Mat, active: &[usize], lambda2: f64, smoother: &Mat) -> Result<f64> {
    if smoother.ncols() != a.ncols() {
        return shape_err(format!(
            "smoother has {} columns, design has {}",
            smoother.ncols(),
            a.ncols()
        ));
    }
    let omega = smoother.transpose() * smoother * lambda2;
    dof_quadratic(a, active, &omega)
}

/// Same as [`dof_smooth_lasso`] with a general quadratic penalty matrix `Ω`.
pub fn dof_quadratic(a: &Mat, active: &[usize], omega: &Mat) -> Result<f64> {
    if active.iter().any(|&j| j >= a.ncols()) {
        return arg_err("active set refers to a column outside the design");
    }
    if active.is_empty() {
        return Ok(0.0);
    }
    let k = active.len();
    let a_s = a.select_columns(active.iter());
    let mut m = a_s.transpose() * &a_s;
    for (ii, &i) in active.iter().enumerate() {
        for (jj, &j) in active.iter().enumerate() {
            m[(ii, jj)] += omega[(i, j)];
        }
    }
    let rhs = a_s.transpose();
    let solved = match m.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            log::warn!("dof: singular restricted system, adding ridge 1e-10");
            let scale = m.diagonal().amax().max(1.0);
            let mut reg = m;
            for i in 0..k {
                reg[(i, i)] += 1e-10 * scale;
            }
            crate::linalg::solve(&reg, &rhs)?
        }
    };
    let trace: f64 = rhs.component_mul(&solved).sum();
    Ok(trace.clamp(0.0, k as f64))
}

/// Rows whose magnitude exceeds `1e-8 · max|x|` in column `col`.
pub fn active_set(x: &Mat, col: usize) -> Vec<usize> {
    let cut = 1e-8 * x.amax();
    (0..x.nrows())
        .filter(|&i| x[(i, col)].abs() > cut && x[(i, col)] != 0.0)
        .collect()
}

/// Configuration of the ADMM engine.
#[derive(Debug, Clone, Serialize)]
pub struct AdmmConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
    /// initial penalty parameter; `None` picks the mean curvature of the data term
    pub rho: Option<f64>,
    /// residual balancing runs every 10 iterations up to this iteration
    pub adapt_until: usize,
    pub divergence_window: usize,
    pub bic_form: BicForm,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-10,
            max_iter: 2000,
            rho: None,
            adapt_until: 500,
            divergence_window: 50,
            bic_form: BicForm::Scaled,
        }
    }
}

/// Strictly convex quadratic data term
/// `½⟨X, P X⟩ + ½α⟨X, X R⟩ − ⟨B, X⟩ + c`, held in eigen-coordinates so that
/// shifted solves `(P·X + α X·R + σX) = RHS` cost two matrix products.
#[derive(Debug, Clone)]
pub(crate) struct QuadraticTerm {
    p: Mat,
    p_vals: Vector,
    p_vecs: Mat,
    right: Option<(Mat, Vector, Mat, f64)>,
    pub(crate) b: Mat,
    c: f64,
}

impl QuadraticTerm {
    pub(crate) fn new(p: Mat, right: Option<(Mat, f64)>, b: Mat, c: f64) -> Self {
        let (p_vals, p_vecs) = sym_eigen(&p);
        let right = right.map(|(r, alpha)| {
            let (vals, vecs) = sym_eigen(&r);
            (r, vals, vecs, alpha)
        });
        Self {
            p,
            p_vals,
            p_vecs,
            right,
            b,
            c,
        }
    }

    /// `½‖Y − A X‖²` plus folded quadratic penalties `Σ λ‖L X‖²`.
    pub(crate) fn least_squares(a: &Mat, y: &Mat, quad: &[(f64, &Mat)]) -> Self {
        let mut p = a.transpose() * a;
        for (lambda, l) in quad {
            p += l.transpose() * *l * (2.0 * lambda);
        }
        Self::new(p, None, a.transpose() * y, 0.5 * frob2(y))
    }

    pub(crate) fn value(&self, x: &Mat) -> f64 {
        let mut v = 0.5 * (x.transpose() * (&self.p * x)).trace();
        if let Some((r, _, _, alpha)) = &self.right {
            v += 0.5 * alpha * (x.transpose() * x * r).trace();
        }
        v - self.b.dot(x) + self.c
    }

    pub(crate) fn mean_curvature(&self) -> f64 {
        let mut m = self.p_vals.mean();
        if let Some((_, vals, _, alpha)) = &self.right {
            m += alpha * vals.mean();
        }
        m
    }

    pub(crate) fn solve_shifted(&self, rhs: &Mat, shift: f64) -> Mat {
        let mut t = self.p_vecs.transpose() * rhs;
        let pmax = self.p_vals.amax();
        match &self.right {
            None => {
                for i in 0..t.nrows() {
                    let d = self.p_vals[i] + shift;
                    let inv = if d.abs() > 1e-13 * (pmax + shift).max(1e-300) {
                        1.0 / d
                    } else {
                        0.0
                    };
                    t.row_mut(i).scale_mut(inv);
                }
                &self.p_vecs * t
            }
            Some((_, r_vals, r_vecs, alpha)) => {
                let mut t = t * r_vecs;
                let scale = (pmax + alpha * r_vals.amax() + shift).max(1e-300);
                for j in 0..t.ncols() {
                    for i in 0..t.nrows() {
                        let d = self.p_vals[i] + alpha * r_vals[j] + shift;
                        t[(i, j)] = if d.abs() > 1e-13 * scale {
                            t[(i, j)] / d
                        } else {
                            0.0
                        };
                    }
                }
                &self.p_vecs * t * r_vecs.transpose()
            }
        }
    }
}

/// Outcome of an ADMM solve.
#[derive(Debug, Clone)]
pub(crate) struct AdmmOutcome {
    pub x: Mat,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

/// Consensus ADMM on `quad(X) + Σ_j π_j(X)` with one split variable per
/// non-smooth penalty.
pub(crate) fn admm_solve(
    quad: &QuadraticTerm,
    nonsmooth: &[Penalty],
    cfg: &AdmmConfig,
) -> Result<AdmmOutcome> {
    let (p, q) = quad.b.shape();
    let m = nonsmooth.len();
    if m == 0 {
        let x = quad.solve_shifted(&quad.b, 0.0);
        let obj = quad.value(&x);
        return Ok(AdmmOutcome {
            x,
            iterations: 0,
            converged: true,
            trace: vec![obj],
        });
    }
    // the returned iterate is the split variable of an indicator if present,
    // otherwise of the first sparsifying penalty
    let rep = nonsmooth
        .iter()
        .position(|p| p.is_indicator())
        .unwrap_or(0);
    let mut rho = cfg.rho.unwrap_or_else(|| {
        let c = quad.mean_curvature();
        if c > 0.0 {
            c
        } else {
            1.0
        }
    });
    let mf = m as f64;
    let mut z: Vec<Mat> = vec![Mat::zeros(p, q); m];
    let mut u: Vec<Mat> = vec![Mat::zeros(p, q); m];
    let mut trace = Vec::new();
    let mut growing = 0usize;
    let mut last_res = f64::INFINITY;
    let mut best_res = f64::INFINITY;
    let sqrt_n = ((p * q) as f64).sqrt();
    for it in 1..=cfg.max_iter {
        let mut rhs = quad.b.clone();
        for j in 0..m {
            rhs += (&z[j] - &u[j]) * rho;
        }
        let x = quad.solve_shifted(&rhs, rho * mf);
        let mut dual_acc = Mat::zeros(p, q);
        let mut primal2 = 0.0;
        for j in 0..m {
            let z_old = std::mem::replace(&mut z[j], Mat::zeros(0, 0));
            let zj = prox(&nonsmooth[j], &(&x + &u[j]), 1.0 / rho)?;
            dual_acc += &zj - &z_old;
            let diff = &x - &zj;
            primal2 += frob2(&diff);
            u[j] += diff;
            z[j] = zj;
        }
        let primal = primal2.sqrt();
        let dual = rho * dual_acc.norm();

        let point = &z[rep];
        let obj = quad.value(point) + nonsmooth_value_sum(nonsmooth, point);
        trace.push(obj);

        if !primal.is_finite() || !dual.is_finite() {
            return Err(Error::Divergence {
                iterations: it,
                detail: "non-finite residuals".into(),
            });
        }
        let res = primal + dual;
        best_res = best_res.min(res);
        // ADMM residuals are not monotone; only sustained growth well above
        // the best residual counts
        if res > last_res && res > 10.0 * best_res {
            growing += 1;
            if growing >= cfg.divergence_window {
                return Err(Error::Divergence {
                    iterations: it,
                    detail: format!(
                        "residuals grew for {} consecutive iterations",
                        cfg.divergence_window
                    ),
                });
            }
        } else {
            growing = 0;
        }
        last_res = res;

        let z_norm = z.iter().map(frob2).sum::<f64>().sqrt();
        let u_sum: Mat = u.iter().fold(Mat::zeros(p, q), |acc, v| acc + v);
        let eps_pri =
            sqrt_n * mf.sqrt() * cfg.abs_tol + cfg.rel_tol * (x.norm() * mf.sqrt()).max(z_norm);
        let eps_dual = sqrt_n * cfg.abs_tol + cfg.rel_tol * rho * u_sum.norm();
        if primal <= eps_pri && dual <= eps_dual {
            return Ok(AdmmOutcome {
                x: z[rep].clone(),
                iterations: it,
                converged: true,
                trace,
            });
        }
        if it % 10 == 0 && it <= cfg.adapt_until {
            let factor = if primal > 10.0 * dual {
                2.0
            } else if dual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                for uj in &mut u {
                    *uj /= factor;
                }
                growing = 0;
                last_res = f64::INFINITY;
                best_res = f64::INFINITY;
            }
        }
    }
    Ok(AdmmOutcome {
        x: z[rep].clone(),
        iterations: cfg.max_iter,
        converged: false,
        trace,
    })
}

fn nonsmooth_value_sum(pens: &[Penalty], x: &Mat) -> f64 {
    pens.iter()
        .filter(|p| !p.is_indicator())
        .map(|p| p.value(x))
        .sum()
}

/// Solution of a penalized least-squares problem.
#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub x: Mat,
    pub report: FitReport,
}

/// Quadratic penalty matrix `Ω` of the folded smooth penalties (Hessian
/// contribution under the ½-scaled fidelity).
pub(crate) fn quadratic_penalty_matrix(penalties: &[Penalty], p: usize) -> Mat {
    let mut omega = Mat::zeros(p, p);
    for pen in penalties {
        if let Some((lambda, l)) = pen.quadratic_part() {
            omega += l.transpose() * l * (2.0 * lambda);
        }
    }
    omega
}

/// Degrees of freedom of a coefficient matrix fitted against `design`: the
/// smooth-lasso trace over each column's active set, summed over columns.
pub(crate) fn solution_dof(design: &Mat, omega: &Mat, x: &Mat) -> Result<f64> {
    let mut cache: std::collections::HashMap<Vec<usize>, f64> = std::collections::HashMap::new();
    let mut dof = 0.0;
    for col in 0..x.ncols() {
        let active = active_set(x, col);
        dof += match cache.get(&active) {
            Some(&d) => d,
            None => {
                let d = dof_quadratic(design, &active, omega)?;
                cache.insert(active, d);
                d
            }
        };
    }
    Ok(dof)
}

/// Minimizes `½‖Y − A X‖² + Σ_j π_j(X)` by consensus ADMM.
///
/// Quadratic penalties are folded into the `X` update; each non-smooth
/// penalty gets its own split variable.
pub fn admm_pls(a: &Mat, y: &Mat, penalties: &[Penalty], cfg: &AdmmConfig) -> Result<PlsSolution> {
    if a.nrows() != y.nrows() {
        return shape_err(format!(
            "design has {} rows but target has {}",
            a.nrows(),
            y.nrows()
        ));
    }
    for pen in penalties {
        pen.validate()?;
        if let Some((_, l)) = pen.quadratic_part() {
            if l.ncols() != a.ncols() {
                return shape_err(format!(
                    "smoother has {} columns, design has {}",
                    l.ncols(),
                    a.ncols()
                ));
            }
        }
    }
    if y.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite input to admm_pls".into()));
    }
    let quad_parts: Vec<(f64, &Mat)> = penalties.iter().filter_map(|p| p.quadratic_part()).collect();
    let nonsmooth: Vec<Penalty> = penalties.iter().filter_map(|p| p.nonsmooth_part()).collect();
    let quad = QuadraticTerm::least_squares(a, y, &quad_parts);
    if nonsmooth.is_empty() && quad.p_vals.min() <= 1e-12 * quad.p_vals.amax().max(1e-300) {
        log::warn!("admm_pls: unpenalized problem is rank deficient; returning minimum-norm solution");
    }
    let out = admm_solve(&quad, &nonsmooth, cfg)?;
    let resid = y - a * &out.x;
    let r2 = frob2(&resid);
    let omega = quadratic_penalty_matrix(penalties, a.ncols());
    let dof = solution_dof(a, &omega, &out.x)?;
    let n = y.len();
    let mut warnings = Vec::new();
    if !out.converged {
        warnings.push(format!("ADMM stopped at max_iter = {}", cfg.max_iter));
    }
    Ok(PlsSolution {
        report: FitReport {
            residual_norm2: r2,
            dof,
            bic: bic_with(cfg.bic_form, r2, dof, n.max(1))?,
            hyperparameters: penalties.iter().flat_map(|p| p.hyperparameters()).collect(),
            iterations: out.iterations,
            converged: out.converged,
            objective_trace: out.trace,
            warnings,
        },
        x: out.x,
    })
}

/// Objective `½‖Y − A X‖² + Σ π_j(X)`.
pub fn pls_objective(a: &Mat, y: &Mat, penalties: &[Penalty], x: &Mat) -> f64 {
    0.5 * frob2(&(y - a * x)) + penalties.iter().map(|p| p.value(x)).sum::<f64>()
}

/// Smooth part of [`pls_objective`] (fidelity plus quadratic penalties) and
/// its gradient `Aᵀ(A X − Y) + Σ 2λ LᵀL X`.
pub fn pls_smooth(a: &Mat, y: &Mat, penalties: &[Penalty], x: &Mat) -> Result<(f64, Mat)> {
    if a.nrows() != y.nrows() || a.ncols() != x.nrows() || y.ncols() != x.ncols() {
        return shape_err(format!(
            "incompatible shapes: A {:?}, Y {:?}, X {:?}",
            a.shape(),
            y.shape(),
            x.shape()
        ));
    }
    let resid = a * x - y;
    let mut value = 0.5 * frob2(&resid);
    let mut grad = a.transpose() * resid;
    for (lambda, l) in penalties.iter().filter_map(|p| p.quadratic_part()) {
        let lx = l * x;
        value += lambda * frob2(&lx);
        grad += l.transpose() * lx * (2.0 * lambda);
    }
    Ok((value, grad))
}

/// One evaluated grid point.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub params: Vec<f64>,
    pub report: Option<FitReport>,
    pub error: Option<String>,
}

/// Result of a BIC grid search.
#[derive(Debug, Clone)]
pub struct GridSearch<T> {
    pub best_params: Vec<f64>,
    pub best: T,
    pub best_report: FitReport,
    pub table: Vec<GridPoint>,
}

/// Cartesian product of the grids, first grid varying slowest.
pub fn grid_points(grids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut points = vec![vec![]];
    for g in grids {
        let mut next = Vec::with_capacity(points.len() * g.len());
        for p in &points {
            for &v in g {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        points = next;
    }
    points
}

/// Evaluates `fit` at every grid point (in parallel) and returns the BIC
/// minimizer. Ties go to the lexicographically larger parameter vector, i.e.
/// the more strongly regularized model.
pub fn grid_search<T, F>(grids: &[Vec<f64>], fit: F) -> Result<GridSearch<T>>
where
    T: Send,
    F: Fn(&[f64]) -> Result<(T, FitReport)> + Sync,
{
    if grids.is_empty() || grids.iter().any(|g| g.is_empty()) {
        return arg_err("every hyperparameter grid must be nonempty");
    }
    let points = grid_points(grids);
    let results: Vec<Result<(T, FitReport)>> = points.par_iter().map(|p| fit(p)).collect();
    let mut table = Vec::with_capacity(points.len());
    let mut best: Option<(usize, T, FitReport)> = None;
    for (idx, (params, res)) in points.iter().zip(results).enumerate() {
        match res {
            Ok((value, report)) => {
                table.push(GridPoint {
                    params: params.clone(),
                    report: Some(report.clone()),
                    error: None,
                });
                if !report.bic.is_finite() {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bi, _, br)) => {
                        let tol = 1e-12 * br.bic.abs().max(1.0);
                        report.bic < br.bic - tol
                            || ((report.bic - br.bic).abs() <= tol
                                && lexicographic_greater(params, &points[*bi]))
                    }
                };
                if better {
                    best = Some((idx, value, report));
                }
            }
            Err(e) => table.push(GridPoint {
                params: params.clone(),
                report: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (idx, value, report) = best.ok_or_else(|| {
        Error::Numerical("every grid point failed to produce a finite BIC".into())
    })?;
    Ok(GridSearch {
        best_params: points[idx].clone(),
        best: value,
        best_report: report,
        table,
    })
}

fn lexicographic_greater(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return true;
        }
        if x < y {
            return false;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_graph_laplacian() {
        let l = path_laplacian(3);
        let expect = Mat::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(l, expect);
        assert_eq!(graph_laplacian(&Mat::zeros(1, 1)).unwrap(), Mat::zeros(1, 1));
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let w = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(matches!(graph_laplacian(&w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn l1_prox_inside_threshold() {
        let z = Mat::from_element(1, 1, 0.5);
        assert_eq!(prox(&Penalty::l1(1.0), &z, 1.0).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn nonneg_prox_clips() {
        let z = Mat::from_row_slice(2, 2, &[-1.0, 2.0, 0.5, -0.1]);
        let x = prox(&Penalty::Nonnegativity, &z, 3.0).unwrap();
        assert_eq!(x, Mat::from_row_slice(2, 2, &[0.0, 2.0, 0.5, 0.0]));
    }

    #[test]
    fn prox_rejects_bad_inputs() {
        let z = Mat::from_element(1, 1, f64::NAN);
        assert!(prox(&Penalty::l1(1.0), &z, 1.0).is_err());
        let z = Mat::from_element(1, 1, 1.0);
        assert!(prox(&Penalty::l1(1.0), &z, 0.0).is_err());
    }

    #[test]
    fn bic_values() {
        assert_eq!(bic(0.0, 0.0, 10).unwrap(), 0.0);
        assert_eq!(bic(2.0, 0.0, 7).unwrap(), 1.0);
        assert!(bic(1.0, 3.0, 10).unwrap() > bic(1.0, 2.0, 10).unwrap());
        assert!(bic(1.0, 0.0, 0).is_err());
    }

    #[test]
    fn dof_empty_and_projection() {
        let a = Mat::identity(4, 3);
        let l = Mat::identity(3, 3);
        assert_eq!(dof_smooth_lasso(&a, &[], 1.0, &l).unwrap(), 0.0);
        let d = dof_smooth_lasso(&a, &[0, 1, 2], 0.0, &l).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_grid_point() {
        let res = grid_search(&[vec![0.3]], |p| {
            Ok((p[0], FitReport {
                bic: 1.0,
                ..Default::default()
            }))
        })
        .unwrap();
        assert_eq!(res.best_params, vec![0.3]);
    }

    #[test]
    fn ties_prefer_larger_lambda() {
        let res = grid_search(&[vec![0.1, 1.0, 0.5]], |p| {
            Ok((p[0], FitReport {
                bic: 2.0,
                ..Default::default()
            }))
        })
        .unwrap();
        assert_eq!(res.best_params, vec![1.0]);
    }

    #[test]
    fn all_failures_reported() {
        let res: Result<GridSearch<()>> =
            grid_search(&[vec![1.0, 2.0]], |_| Err(Error::Numerical("boom".into())));
        assert!(res.is_err());
    }
}
