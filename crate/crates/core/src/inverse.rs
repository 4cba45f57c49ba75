//! Linear forward models and penalized inverse solvers for EEG and fMRI.
//!
//! The data terms here are unhalved (`‖V − K G‖² + π(G)`), so penalties are
//! handed to the ½-scaled least-squares engine at half weight.

use statrs::function::gamma::ln_gamma;

use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{frob2, Mat};
use crate::parafac::{fit_parafac, ModeConstraints, ModeSpec, ParafacConfig};
use crate::penalties::{
    admm_pls, admm_solve, bic_with, quadratic_penalty_matrix, solution_dof, AdmmConfig, FitReport,
    Penalty, PlsSolution, QuadraticTerm,
};
use crate::tensor::DenseTensor;

/// Lead field, source Laplacian and hemodynamic matrix of a simulation or
/// recording.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    /// `I_E × I_Cx`
    pub lead_field: Mat,
    /// `I_Cx × I_Cx`
    pub laplacian: Mat,
    /// `I_T × I_Tδ`
    pub hemodynamic: Option<Mat>,
    pub eeg_rate_hz: f64,
    /// fine-grid sample index of every fMRI sample
    pub subsample: Vec<usize>,
}

impl ForwardModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.lead_field.ncols();
        if self.laplacian.shape() != (n, n) {
            return shape_err(format!(
                "Laplacian is {:?}, expected {n}×{n}",
                self.laplacian.shape()
            ));
        }
        if let Some(h) = &self.hemodynamic {
            if h.ncols() != self.subsample.len() {
                return shape_err("hemodynamic matrix and subsample list disagree");
            }
        }
        Ok(())
    }

    pub fn hemodynamic(&self) -> Result<&Mat> {
        self.hemodynamic
            .as_ref()
            .ok_or_else(|| crate::Error::InvalidArgument("forward model has no hemodynamic matrix".into()))
    }
}

fn gamma_pdf(t: f64, shape: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t - ln_gamma(shape)).exp()
}

/// Double-gamma hemodynamic response sampled every `dt` seconds for
/// `duration` seconds: response peak at 6 s, undershoot at 16 s, undershoot
/// ratio 1/6. Entries are density values times `dt`.
pub fn double_gamma_hrf(dt: f64, duration: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !(duration > 0.0) {
        return arg_err("HRF sampling step and duration must be positive");
    }
    let n = (duration / dt).floor() as usize + 1;
    Ok((0..n)
        .map(|i| {
            let t = i as f64 * dt;
            dt * (gamma_pdf(t, 7.0) - gamma_pdf(t, 17.0) / 6.0)
        })
        .collect())
}

/// Fine-grid indices of samples taken every `step` samples, ending each
/// acquisition interval: `step−1, 2·step−1, …`.
pub fn subsample_every(n_times: usize, step: usize) -> Vec<usize> {
    if step == 0 {
        return vec![];
    }
    (1..=n_times / step).map(|j| j * step - 1).collect()
}

/// `H(t, j) = h(s_j − t)` so that `(Γ·H)(:, j)` is the causal convolution of
/// `Γ` with `h` evaluated at fine sample `s_j`.
pub fn build_hemodynamic(h: &[f64], n_times: usize, subsample: &[usize]) -> Result<Mat> {
    if h.iter().any(|v| !v.is_finite()) {
        return arg_err("impulse response has non-finite values");
    }
    if let Some(&s) = subsample.iter().find(|&&s| s >= n_times) {
        return arg_err(format!("subsample index {s} is outside 0..{n_times}"));
    }
    let mut m = Mat::zeros(n_times, subsample.len());
    for (j, &s) in subsample.iter().enumerate() {
        for (lag, &v) in h.iter().enumerate().take(s + 1) {
            m[(s - lag, j)] = v;
        }
    }
    Ok(m)
}

fn halved(penalties: &[Penalty]) -> Vec<Penalty> {
    penalties.iter().map(|p| p.scaled(0.5)).collect()
}

/// `argmin_G ‖V − K G‖² + Σ π(G)`. Use `Penalty::smooth(λ, L)` for LORETA,
/// `Penalty::smooth_lasso` for the smooth lasso.
pub fn eeg_inverse(v: &Mat, lead_field: &Mat, penalties: &[Penalty], cfg: &AdmmConfig) -> Result<PlsSolution> {
    admm_pls(lead_field, v, &halved(penalties), cfg)
}

/// Penalty on the source signal `Γ` for fMRI deconvolution.
#[derive(Debug, Clone)]
pub enum DeconvPenalty {
    None,
    /// `λ ‖Γ‖²`
    Wiener(f64),
    /// `λ ‖Γ L‖²` with `L` acting on time
    Laplacian { lambda: f64, laplacian: Mat },
    /// penalties on `Γᵀ` (time × sources)
    Custom(Vec<Penalty>),
}

impl DeconvPenalty {
    fn on_transpose(&self, n_times: usize) -> Vec<Penalty> {
        match self {
            DeconvPenalty::None => vec![],
            DeconvPenalty::Wiener(l) => vec![Penalty::smooth(*l, Mat::identity(n_times, n_times))],
            DeconvPenalty::Laplacian { lambda, laplacian } => {
                vec![Penalty::smooth(*lambda, laplacian.transpose())]
            }
            DeconvPenalty::Custom(p) => p.clone(),
        }
    }
}

/// `argmin_Γ ‖B − Γ H‖² + π(Γ)`, solved on the transposed system.
pub fn fmri_deconvolve(b: &Mat, h: &Mat, penalty: &DeconvPenalty, cfg: &AdmmConfig) -> Result<PlsSolution> {
    if b.ncols() != h.ncols() {
        return shape_err(format!(
            "data has {} samples, hemodynamic matrix has {} columns",
            b.ncols(),
            h.ncols()
        ));
    }
    let pens = halved(&penalty.on_transpose(h.nrows()));
    let mut sol = admm_pls(&h.transpose(), &b.transpose(), &pens, cfg)?;
    sol.x = sol.x.transpose();
    Ok(sol)
}

/// `argmin_G ‖V − K G‖² + α‖B − G H‖² + π(G)` (sources shared between the
/// modalities with proportionality constant 1).
pub fn matrix_fusion(
    v: &Mat,
    b: &Mat,
    lead_field: &Mat,
    h: &Mat,
    alpha: f64,
    penalties: &[Penalty],
    cfg: &AdmmConfig,
) -> Result<PlsSolution> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return arg_err(format!("alpha must be finite and nonnegative, got {alpha}"));
    }
    let n_src = lead_field.ncols();
    if v.nrows() != lead_field.nrows() || b.nrows() != n_src || v.ncols() != h.nrows() || b.ncols() != h.ncols() {
        return shape_err(format!(
            "incompatible shapes: V {:?}, B {:?}, K {:?}, H {:?}",
            v.shape(),
            b.shape(),
            lead_field.shape(),
            h.shape()
        ));
    }
    let pens = halved(penalties);
    for p in &pens {
        p.validate()?;
    }
    let omega = quadratic_penalty_matrix(&pens, n_src);
    let p = lead_field.transpose() * lead_field + &omega;
    let lin = lead_field.transpose() * v + b * h.transpose() * alpha;
    let quad = QuadraticTerm::new(
        p,
        Some((h * h.transpose(), alpha)),
        lin,
        0.5 * frob2(v) + 0.5 * alpha * frob2(b),
    );
    let nonsmooth: Vec<Penalty> = pens.iter().filter_map(|p| p.nonsmooth_part()).collect();
    let out = admm_solve(&quad, &nonsmooth, cfg)?;
    let r2 = frob2(&(v - lead_field * &out.x)) + alpha * frob2(&(b - &out.x * h));
    let dof = solution_dof(lead_field, &omega, &out.x)?;
    let n = v.len() + b.len();
    let mut hyper = vec![("alpha".to_string(), alpha)];
    hyper.extend(penalties.iter().flat_map(|p| p.hyperparameters()));
    Ok(PlsSolution {
        report: FitReport {
            residual_norm2: r2,
            dof,
            bic: bic_with(cfg.bic_form, r2, dof, n)?,
            hyperparameters: hyper,
            iterations: out.iterations,
            converged: out.converged,
            objective_trace: out.trace,
            warnings: vec![],
        },
        x: out.x,
    })
}

/// Spatial factor result of an orthogonal-nonnegative decomposition.
#[derive(Debug, Clone)]
pub struct StonnicaFit {
    /// sources × R, orthonormal nonnegative columns
    pub spatial: Mat,
    /// time × R, carrying the atom scales
    pub temporal: Mat,
    /// frequency × R, unit nonnegative columns (tensor variant only)
    pub spectral: Option<Mat>,
    pub report: FitReport,
}

fn spatial_spec(lead_field: &Mat, laplacian: &Mat, l1: f64, l2: f64) -> ModeSpec {
    let mut spec = ModeSpec::onn().with_operator(lead_field.clone());
    if l1 > 0.0 || l2 > 0.0 {
        spec = spec.with_penalty(Penalty::smooth_lasso(l1, l2, laplacian.clone()));
    }
    spec
}

/// `½‖V − K M T‖² + λ1‖M‖₁ + λ2‖L M‖²` with `MᵀM = I, M ≥ 0`.
pub fn stonnica(
    v: &Mat,
    model: &ForwardModel,
    rank: usize,
    l1: f64,
    l2: f64,
    cfg: &ParafacConfig,
) -> Result<StonnicaFit> {
    model.validate()?;
    let k = &model.lead_field;
    if v.nrows() != k.nrows() {
        return shape_err("data rows and lead-field rows differ");
    }
    let x = DenseTensor::from_matrix(v);
    let cons = ModeConstraints::new(vec![spatial_spec(k, &model.laplacian, l1, l2), ModeSpec::free()]);
    let mut fit = fit_parafac(&x, rank, &cons, cfg)?;
    if rank > k.nrows() {
        fit.report.warnings.push(format!("rank {rank} exceeds the {} sensors", k.nrows()));
    }
    let temporal = &fit.variables[1] * Mat::from_diagonal(&fit.model.weights);
    Ok(StonnicaFit {
        spatial: fit.variables[0].clone(),
        temporal,
        spectral: None,
        report: fit.report,
    })
}

/// `½‖S_T − [[K M, T, F]]‖² + λ1‖M‖₁ + λ2‖L M‖²` with `M` orthogonal and
/// nonnegative and `F ≥ 0`.
pub fn tensor_stonnica(
    s_t: &DenseTensor,
    model: &ForwardModel,
    rank: usize,
    l1: f64,
    l2: f64,
    cfg: &ParafacConfig,
) -> Result<StonnicaFit> {
    model.validate()?;
    if s_t.order() != 3 {
        return arg_err("tensor STONNICA needs an order-3 spectral tensor");
    }
    let k = &model.lead_field;
    if s_t.shape()[0] != k.nrows() {
        return shape_err("tensor mode 1 and lead-field rows differ");
    }
    let cons = ModeConstraints::new(vec![
        spatial_spec(k, &model.laplacian, l1, l2),
        ModeSpec::free(),
        ModeSpec::nonnegative(),
    ]);
    let mut fit = fit_parafac(s_t, rank, &cons, cfg)?;
    if rank > k.nrows() {
        fit.report.warnings.push(format!("rank {rank} exceeds the {} sensors", k.nrows()));
    }
    Ok(StonnicaFit {
        spatial: fit.variables[0].clone(),
        temporal: &fit.variables[1] * Mat::from_diagonal(&fit.model.weights),
        spectral: Some(fit.variables[2].clone()),
        report: fit.report,
    })
}
