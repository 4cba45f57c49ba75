//! Subcommand implementations. Each reads its parameters, validates every
//! key and input path before computing, and writes its artifacts into the
//! output directory.

use std::path::PathBuf;

use multiway::fusion::{cmtf, npls, CmtfConfig, CmtfRanks, NplsConfig};
use multiway::granger::{
    bivariate_edges, bivariate_gc, build_lagged, connectivity_edges, demean, gc_parafac, levinson_naive, levinson_tnn,
    relative_prediction_error, sample_cov_tensor, write_edges_csv, GcParafacConfig,
};
use multiway::inverse::{
    build_hemodynamic, double_gamma_hrf, eeg_inverse, fmri_deconvolve, matrix_fusion, stonnica, subsample_every, tensor_stonnica,
    DeconvPenalty, ForwardModel,
};
use multiway::linalg::frob2;
use multiway::parafac::{explained_variance, fit_parafac, select_rank, ModeConstraints, ModeSpec, ParafacConfig, RankSelectConfig};
use multiway::penalties::{grid_search, path_laplacian, AdmmConfig, FitReport, Penalty};
use multiway::synth::{
    add_noise, boxcar, lead_field, make_cmtf_scene, make_coupled_pair, make_scene, random_kruskal, random_mar, rng, simulate_eeg,
    simulate_fmri, simulate_mar, AtomSpec, CmtfSceneSpec, CoupledSpec, Lattice, SceneSpec, SpectralProfile,
};
use multiway::talgebra::{max_t_singular, t_svd, t_svd_truncate, tnn};
use multiway::Mat;
use rand::Rng;
use serde::Serialize;

use crate::config::{self, Params};
use crate::output::Run;
use crate::{CliError, Common};

pub const COMMANDS: &[&str] = &[
    "simulate", "parafac", "stonnica", "tstonnica", "deconvolve", "fuse-matrix", "granger", "npls", "cmtf", "tsvd", "select",
];

const BASE: &[&str] = &["output", "seed"];

fn allowed(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = BASE.to_vec();
    v.extend_from_slice(extra);
    v
}

pub fn run(command: &str, common: &Common, seed_flag: Option<u64>) -> Result<PathBuf, CliError> {
    let file = match &common.config {
        Some(path) => config::parse(&std::fs::read_to_string(path)?)?,
        None => config::ConfigFile::default(),
    };
    let params = Params::resolve(command, &file, &common.set)?;
    params.check(&allowed(keys_for(command, &params)))?;
    let seed = match seed_flag {
        Some(s) => s,
        None => params.get("seed", 0u64)?,
    };
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => PathBuf::from(params.get("output", String::from("out"))?),
    };
    let mut run = Run::new(dir, params, seed)?;
    match command {
        "simulate" => simulate(&mut run)?,
        "parafac" => parafac(&mut run)?,
        "stonnica" => stonnica_cmd(&mut run, false)?,
        "tstonnica" => stonnica_cmd(&mut run, true)?,
        "deconvolve" => deconvolve(&mut run)?,
        "fuse-matrix" => fuse_matrix(&mut run)?,
        "granger" => granger(&mut run)?,
        "npls" => npls_cmd(&mut run)?,
        "cmtf" => cmtf_cmd(&mut run)?,
        "tsvd" => tsvd(&mut run)?,
        "select" => select(&mut run)?,
        other => return Err(CliError::Config(format!("unknown command '{other}'"))),
    }
    run.finish()
}

fn keys_for(command: &str, p: &Params) -> &'static [&'static str] {
    match command {
        "simulate" => match p.raw("kind").unwrap_or("parafac") {
            "parafac" => &["kind", "shape", "weights", "nonneg", "snr_db"],
            "eeg" => &["kind", "lattice", "sensors", "lead_width", "centers", "width", "peaks", "n_times", "rate_hz", "snr_db"],
            "fmri" => &["kind", "nodes", "n_times", "dt", "hrf_duration", "every", "period", "snr_db"],
            "fusion" => &[
                "kind", "lattice", "sensors", "lead_width", "center", "width", "n_times", "period", "dt", "hrf_duration", "every",
                "eeg_snr_db", "fmri_snr_db",
            ],
            "mar" => &["kind", "nodes", "lags", "density", "radius", "n_times", "sigma"],
            "coupled" => &["kind", "x_shape", "n_shared", "y_rows", "rank", "snr_db", "independent"],
            "cmtf" => &[
                "kind", "lattice", "common", "tensor_only", "matrix_only", "width", "sensors", "n_times", "n_freqs", "matrix_cols",
                "snr_db",
            ],
            _ => &["kind"],
        },
        "parafac" => &["input", "rank", "constraints", "max_sweeps", "tol", "restarts"],
        "stonnica" | "tstonnica" => &["input", "lead_field", "lattice", "rank", "l1", "l2", "rate_hz", "max_sweeps", "tol", "restarts"],
        "deconvolve" => &["input", "hemodynamic", "penalty", "lambda"],
        "fuse-matrix" => &["eeg", "fmri", "lead_field", "hemodynamic", "lattice", "lambda", "alpha"],
        "granger" => &[
            "input", "lags", "method", "lambda", "rank", "alpha", "threshold", "demean", "lattice", "lambdas", "tol", "max_sweeps",
        ],
        "npls" => &["x", "y", "rank", "permutations", "x_shared", "y_shared"],
        "cmtf" => &[
            "tensor", "matrix", "lead_field", "common", "tensor_only", "matrix_only", "lattice", "lambdas", "gamma", "max_sweeps", "tol",
            "restarts",
        ],
        "tsvd" => &["input", "rank"],
        "select" => match p.raw("target").unwrap_or("rank") {
            "rank" => &["target", "input", "r_max", "constraints", "threshold"],
            "eeg" => &["target", "eeg", "lead_field", "lattice", "grid"],
            _ => &["target"],
        },
        _ => &[],
    }
}

fn lattice(p: &Params, default: &[usize]) -> Result<Lattice, CliError> {
    Ok(Lattice::new(&p.list("lattice", default)?)?)
}

fn mode_specs(p: &Params, key: &str, order: usize) -> Result<ModeConstraints, CliError> {
    let names: Vec<String> = p.list(key, &vec!["free".to_string(); order])?;
    if names.len() != order {
        return Err(CliError::Config(format!("'{key}' lists {} modes, the tensor has {order}", names.len())));
    }
    let specs = names
        .iter()
        .map(|n| match n.as_str() {
            "free" => Ok(ModeSpec::free()),
            "nonneg" => Ok(ModeSpec::nonnegative()),
            "onn" => Ok(ModeSpec::onn()),
            other => Err(CliError::Config(format!("unknown constraint '{other}' in '{key}'"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModeConstraints::new(specs))
}

fn parafac_cfg(run: &Run) -> Result<ParafacConfig, CliError> {
    let d = ParafacConfig::default();
    Ok(ParafacConfig {
        max_sweeps: run.params.count("max_sweeps", d.max_sweeps)?,
        tol: run.params.positive("tol", d.tol)?,
        restarts: run.params.get("restarts", d.restarts)?,
        seed: run.seed,
        ..d
    })
}

fn simulate(run: &mut Run) -> Result<(), CliError> {
    let p = run.params.clone();
    let seed = run.seed;
    match p.raw("kind").unwrap_or("parafac") {
        "parafac" => {
            let shape: Vec<usize> = p.list("shape", &[40, 30, 20])?;
            let weights: Vec<f64> = p.list("weights", &[3.0, 2.0, 1.0])?;
            let mut nonneg: Vec<bool> = p.list("nonneg", &[])?;
            if nonneg.is_empty() {
                // last mode nonnegative, like a spectral or lag signature
                nonneg = (0..shape.len()).map(|n| n + 1 == shape.len()).collect();
            }
            let truth = random_kruskal(&shape, &weights, &nonneg, seed)?;
            let x = multiway::synth::add_noise_tensor(&truth.reconstruct(), p.get("snr_db", 20.0)?, &mut rng(seed + 100));
            run.save_tensor("data.tns", &x)?;
            for (n, f) in truth.factors.iter().enumerate() {
                run.save_matrix(&format!("truth_factor{n}.tns"), f)?;
            }
            run.save_matrix("truth_weights.tns", &Mat::from_column_slice(weights.len(), 1, truth.weights.as_slice()))?;
        }
        "eeg" => {
            let lat = lattice(&p, &[10, 10, 5])?;
            let k = lead_field(&lat, p.count("sensors", 64)?, p.positive("lead_width", 2.0)?, seed)?;
            let mut r = rng(seed);
            let default_center = r.random_range(0..lat.n_nodes());
            let centers: Vec<usize> = p.list("centers", &[default_center])?;
            let peaks: Vec<f64> = p.list("peaks", &vec![10.0; centers.len()])?;
            if peaks.len() != centers.len() {
                return Err(CliError::Config("'peaks' and 'centers' differ in length".into()));
            }
            let width = p.positive("width", 1.5)?;
            let atoms = centers
                .iter()
                .zip(&peaks)
                .map(|(&center, &hz)| AtomSpec {
                    center,
                    width,
                    profile: if hz > 0.0 { SpectralProfile::Peak { hz } } else { SpectralProfile::OneOverF },
                })
                .collect();
            let scene = make_scene(&SceneSpec {
                lattice: lat,
                atoms,
                n_times: p.count("n_times", 40)?,
                rate_hz: p.positive("rate_hz", 100.0)?,
                snr_db: p.get("snr_db", 10.0)?,
                seed,
            })?;
            let eeg = simulate_eeg(&scene, &k)?;
            run.save_matrix("eeg.tns", &eeg.v)?;
            run.save_matrix("lead_field.tns", &k)?;
            run.save_matrix("truth_spatial.tns", &scene.spatial)?;
            run.save_matrix("truth_temporal.tns", &scene.temporal)?;
            run.save_csv("truth_spatial.csv", "atom", &scene.spatial)?;
        }
        "fmri" => {
            let nodes = p.count("nodes", 5)?;
            let n = p.count("n_times", 400)?;
            let period = p.count("period", 40)?;
            let h = build_hemodynamic(
                &double_gamma_hrf(p.positive("dt", 0.5)?, p.positive("hrf_duration", 32.0)?)?,
                n,
                &subsample_every(n, p.count("every", 2)?),
            )?;
            let gamma = Mat::from_fn(nodes, n, |i, t| boxcar(n, period + 4 * i, period + 4 * i)[t]);
            let (b, _) = simulate_fmri(&gamma, &h, p.get("snr_db", 20.0)?, seed)?;
            run.save_matrix("fmri.tns", &b)?;
            run.save_matrix("hemodynamic.tns", &h)?;
            run.save_matrix("truth_gamma.tns", &gamma)?;
        }
        "fusion" => {
            let lat = lattice(&p, &[10, 10, 5])?;
            let k = lead_field(&lat, p.count("sensors", 64)?, p.positive("lead_width", 2.0)?, seed)?;
            let default_center = rng(seed).random_range(0..lat.n_nodes());
            let center: usize = p.get("center", default_center)?;
            if center >= lat.n_nodes() {
                return Err(CliError::Config(format!("'center' {center} is outside the lattice")));
            }
            let n = p.count("n_times", 200)?;
            let period = p.count("period", 20)?;
            let h = build_hemodynamic(
                &double_gamma_hrf(p.positive("dt", 0.5)?, p.positive("hrf_duration", 32.0)?)?,
                n,
                &subsample_every(n, p.count("every", 2)?),
            )?;
            let blob = lat.blob(center, p.positive("width", 1.5)?);
            let tc = boxcar(n, period, period);
            let g = Mat::from_fn(lat.n_nodes(), n, |i, t| blob[i] * tc[t]);
            let mut r = rng(seed + 7);
            let v = add_noise(&(&k * &g), p.get("eeg_snr_db", 10.0)?, &mut r);
            let b = add_noise(&(&g * &h), p.get("fmri_snr_db", -10.0)?, &mut r);
            run.save_matrix("eeg.tns", &v)?;
            run.save_matrix("fmri.tns", &b)?;
            run.save_matrix("lead_field.tns", &k)?;
            run.save_matrix("hemodynamic.tns", &h)?;
            run.save_matrix("truth_sources.tns", &g)?;
        }
        "mar" => {
            let a = random_mar(
                p.count("nodes", 5)?,
                p.count("lags", 2)?,
                p.positive("density", 1.0)?,
                p.positive("radius", 0.9)?,
                seed,
            )?;
            let s = simulate_mar(&a, p.positive("sigma", 1.0)?, p.count("n_times", 10_000)?, seed)?;
            run.save_matrix("series.tns", &s)?;
            run.save_tensor("truth_connectivity.tns", &a)?;
        }
        "coupled" => {
            let xs: Vec<usize> = p.list("x_shape", &[10, 12])?;
            if xs.len() != 2 {
                return Err(CliError::Config("'x_shape' needs two extents".into()));
            }
            let pair = make_coupled_pair(&CoupledSpec {
                x_shape: [xs[0], xs[1]],
                n_shared: p.count("n_shared", 100)?,
                y_rows: p.count("y_rows", 20)?,
                rank: p.count("rank", 3)?,
                snr_db: p.get("snr_db", 20.0)?,
                independent: p.get("independent", false)?,
                seed,
            })?;
            run.save_tensor("x.tns", &pair.x)?;
            run.save_matrix("y.tns", &pair.y)?;
            run.save_matrix("truth_shared.tns", &pair.x_truth.factors[1])?;
        }
        "cmtf" => {
            let sc = make_cmtf_scene(&CmtfSceneSpec {
                lattice: lattice(&p, &[10, 10])?,
                common: p.list("common", &[22])?,
                tensor_only: p.list("tensor_only", &[27])?,
                matrix_only: p.list("matrix_only", &[72])?,
                width: p.positive("width", 1.0)?,
                n_sensors: p.count("sensors", 31)?,
                n_times: p.count("n_times", 38)?,
                n_freqs: p.count("n_freqs", 58)?,
                matrix_cols: p.count("matrix_cols", 60)?,
                snr_db: p.get("snr_db", 20.0)?,
                seed,
            })?;
            run.save_tensor("tensor.tns", &sc.tensor)?;
            run.save_matrix("matrix.tns", &sc.matrix)?;
            run.save_matrix("lead_field.tns", &sc.lead_field)?;
            run.save_matrix("truth_common.tns", &sc.common)?;
            run.save_matrix("truth_tensor_spatial.tns", &sc.tensor_spatial)?;
            run.save_matrix("truth_matrix_spatial.tns", &sc.matrix_spatial)?;
        }
        other => return Err(CliError::Config(format!("unknown simulation kind '{other}'"))),
    }
    Ok(())
}

#[derive(Serialize)]
struct ParafacSummary {
    rank: usize,
    explained_variance: f64,
    rank_flagged: bool,
}

fn parafac(run: &mut Run) -> Result<(), CliError> {
    let rank = run.params.count("rank", 1)?;
    let cfg = parafac_cfg(run)?;
    let x = run.tensor("input")?;
    let cons = mode_specs(&run.params, "constraints", x.order())?;
    let fit = fit_parafac(&x, rank, &cons, &cfg)?;
    for (n, f) in fit.model.factors.iter().enumerate() {
        run.save_matrix(&format!("factor{n}.tns"), f)?;
        run.save_csv(&format!("factor{n}.csv"), "atom", f)?;
    }
    let w = Mat::from_row_slice(1, fit.model.rank(), fit.model.weights.as_slice());
    run.save_csv("weights.csv", "atom", &w)?;
    run.save_report(&fit.report)?;
    let summary = ParafacSummary {
        rank,
        explained_variance: explained_variance(&x, &fit.model)?,
        rank_flagged: fit.rank_flagged,
    };
    run.save_json("summary.json", &summary)
}

fn stonnica_cmd(run: &mut Run, spectral: bool) -> Result<(), CliError> {
    let rank = run.params.count("rank", 1)?;
    let (l1, l2) = (run.params.nonnegative("l1", 0.0)?, run.params.nonnegative("l2", 0.0)?);
    let rate = run.params.positive("rate_hz", 100.0)?;
    let lat = lattice(&run.params, &[10, 10, 5])?;
    let cfg = parafac_cfg(run)?;
    let k = run.matrix("lead_field")?;
    let model = ForwardModel { lead_field: k, laplacian: lat.laplacian(), hemodynamic: None, eeg_rate_hz: rate, subsample: vec![] };
    let fit = if spectral {
        let s = run.tensor("input")?;
        tensor_stonnica(&s, &model, rank, l1, l2, &cfg)?
    } else {
        let v = run.matrix("input")?;
        stonnica(&v, &model, rank, l1, l2, &cfg)?
    };
    run.save_csv("spatial.csv", "atom", &fit.spatial)?;
    run.save_matrix("spatial.tns", &fit.spatial)?;
    run.save_csv("temporal.csv", "atom", &fit.temporal)?;
    run.save_matrix("temporal.tns", &fit.temporal)?;
    if let Some(f) = &fit.spectral {
        run.save_csv("spectral.csv", "atom", f)?;
        run.save_matrix("spectral.tns", f)?;
    }
    run.save_report(&fit.report)
}

fn deconvolve(run: &mut Run) -> Result<(), CliError> {
    let lambda = run.params.nonnegative("lambda", 0.01)?;
    let penalty = match run.params.raw("penalty").unwrap_or("wiener") {
        "none" => DeconvPenalty::None,
        "wiener" => DeconvPenalty::Wiener(lambda),
        other => return Err(CliError::Config(format!("unknown penalty '{other}' (none | wiener)"))),
    };
    let h = run.matrix("hemodynamic")?;
    let b = run.matrix("input")?;
    let sol = fmri_deconvolve(&b, &h, &penalty, &AdmmConfig::default())?;
    run.save_matrix("sources.tns", &sol.x)?;
    run.save_csv("sources.csv", "node", &sol.x.transpose())?;
    run.save_report(&sol.report)
}

fn fuse_matrix(run: &mut Run) -> Result<(), CliError> {
    let lambda = run.params.nonnegative("lambda", 0.1)?;
    let lat = lattice(&run.params, &[10, 10, 5])?;
    let v = run.matrix("eeg")?;
    let b = run.matrix("fmri")?;
    let k = run.matrix("lead_field")?;
    let h = run.matrix("hemodynamic")?;
    let auto = frob2(&v) / frob2(&b).max(f64::MIN_POSITIVE);
    let alpha = run.params.nonnegative("alpha", auto)?;
    let sol = matrix_fusion(&v, &b, &k, &h, alpha, &[Penalty::smooth(lambda, lat.laplacian())], &AdmmConfig::default())?;
    run.save_matrix("sources.tns", &sol.x)?;
    let power = Mat::from_fn(sol.x.nrows(), 1, |i, _| sol.x.row(i).norm());
    run.save_csv("source_power.csv", "power", &power)?;
    run.save_report(&sol.report)
}

fn edges_csv(run: &mut Run, edges: &[multiway::granger::Edge]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_edges_csv(&mut buf, edges)?;
    run.save_text("edges.csv", &buf)
}

fn granger(run: &mut Run) -> Result<(), CliError> {
    let p = run.params.clone();
    let lags = p.count("lags", 2)?;
    let method = p.raw("method").unwrap_or("naive").to_string();
    let threshold = p.nonnegative("threshold", 1e-3)?;
    let raw = run.matrix("input")?;
    let series = if p.get("demean", true)? { demean(&raw) } else { raw };
    match method.as_str() {
        "naive" | "tnn" => {
            let sys = build_lagged(&series, lags)?;
            let r = sample_cov_tensor(&sys);
            let lambda = p.nonnegative("lambda", 0.0)?;
            let a = if method == "naive" { levinson_naive(&r)? } else { levinson_tnn(&r, lambda)? };
            let rel = relative_prediction_error(&a, &sys)?;
            let mut hyper = vec![("lags".to_string(), lags as f64)];
            if method == "tnn" {
                hyper.push(("lambda".into(), lambda));
                hyper.push(("max_t_singular".into(), max_t_singular(&r.slice_mode(2, 0..lags)?)?));
            }
            let report = FitReport {
                residual_norm2: rel * frob2(&sys.target),
                hyperparameters: hyper,
                converged: true,
                ..FitReport::default()
            };
            run.save_tensor("connectivity.tns", &a)?;
            edges_csv(run, &connectivity_edges(&a, threshold)?)?;
            run.save_report(&report)
        }
        "parafac" => {
            let sys = build_lagged(&series, lags)?;
            let lambdas: Vec<f64> = p.list("lambdas", &[0.0; 6])?;
            let lambdas: [f64; 6] = lambdas.try_into().map_err(|_| CliError::Config("'lambdas' needs six values".into()))?;
            let node_lap = match p.raw("lattice") {
                Some(_) => lattice(&p, &[])?.laplacian(),
                None => Mat::zeros(series.nrows(), series.nrows()),
            };
            let base = if lambdas.iter().any(|&l| l != 0.0) {
                GcParafacConfig::smooth_lasso(&node_lap, &path_laplacian(lags), lambdas)
            } else {
                GcParafacConfig::default()
            };
            let cfg = GcParafacConfig {
                seed: run.seed,
                tol: p.positive("tol", base.tol)?,
                max_sweeps: p.count("max_sweeps", base.max_sweeps)?,
                ..base
            };
            let fit = gc_parafac(&sys, p.count("rank", 3)?, &cfg)?;
            run.save_tensor("connectivity.tns", &fit.connectivity)?;
            run.save_csv("receiver.csv", "atom", &fit.receiver)?;
            run.save_csv("sender.csv", "atom", &fit.sender)?;
            run.save_csv("lag.csv", "atom", &fit.lag)?;
            edges_csv(run, &connectivity_edges(&fit.connectivity, threshold)?)?;
            run.save_report(&fit.report)
        }
        "bivariate" => {
            let gc = bivariate_gc(&series, lags, p.positive("alpha", 0.05)?)?;
            run.save_csv("statistic.csv", "source", &gc.statistic)?;
            run.save_csv("p_values.csv", "source", &gc.p_value)?;
            run.save_csv("p_adjusted.csv", "source", &gc.p_adjusted)?;
            edges_csv(run, &bivariate_edges(&gc, lags))
        }
        other => Err(CliError::Config(format!("unknown method '{other}' (naive | tnn | parafac | bivariate)"))),
    }
}

#[derive(Serialize)]
struct AtomRow {
    covariance: f64,
    correlation: f64,
    p_value: Option<f64>,
}

fn npls_cmd(run: &mut Run) -> Result<(), CliError> {
    let p = run.params.clone();
    let cfg = NplsConfig {
        x_shared: p.get("x_shared", 1)?,
        y_shared: p.get("y_shared", 1)?,
        permutations: p.get("permutations", 1000)?,
        seed: run.seed,
        ..NplsConfig::default()
    };
    let rank = p.count("rank", 1)?;
    let x = run.tensor("x")?;
    let y = run.tensor("y")?;
    let fit = npls(&x, &y, rank, &cfg)?;
    run.save_csv("x_scores.csv", "atom", &fit.t_x)?;
    run.save_csv("y_scores.csv", "atom", &fit.t_y)?;
    run.save_matrix("x_scores.tns", &fit.t_x)?;
    run.save_matrix("c.tns", &fit.c)?;
    let rows: Vec<AtomRow> =
        fit.atoms.iter().map(|a| AtomRow { covariance: a.covariance, correlation: a.correlation, p_value: a.p_value }).collect();
    run.save_json("atoms.json", &rows)?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

fn cmtf_cmd(run: &mut Run) -> Result<(), CliError> {
    let p = run.params.clone();
    let ranks = CmtfRanks {
        common: p.count("common", 1)?,
        tensor_only: p.get("tensor_only", 1)?,
        matrix_only: p.get("matrix_only", 1)?,
    };
    let lambdas: Vec<f64> = p.list("lambdas", &[0.0; 6])?;
    let lambdas: [f64; 6] = lambdas.try_into().map_err(|_| CliError::Config("'lambdas' needs six values".into()))?;
    let laplacian = match p.raw("lattice") {
        Some(_) => Some(lattice(&p, &[])?.laplacian()),
        None => None,
    };
    let gamma = match p.raw("gamma") {
        Some(_) => Some(p.nonnegative("gamma", 0.0)?),
        None => None,
    };
    let d = CmtfConfig::new(ranks);
    let cfg = CmtfConfig {
        lambdas,
        laplacian,
        gamma,
        max_sweeps: p.count("max_sweeps", d.max_sweeps)?,
        tol: p.positive("tol", d.tol)?,
        init_restarts: p.get("restarts", d.init_restarts)?,
        seed: run.seed,
        ..d
    };
    let s = run.tensor("tensor")?;
    let b = run.matrix("matrix")?;
    let k = run.matrix("lead_field")?;
    let fit = cmtf(&s, &b, &k, &cfg)?;
    let m = &fit.model;
    for (name, mat) in [
        ("common", &m.common),
        ("tensor_spatial", &m.tensor_spatial),
        ("matrix_spatial", &m.matrix_spatial),
        ("t_v", &m.t_v),
        ("f_v", &m.f_v),
        ("t_b", &m.t_b),
    ] {
        run.save_csv(&format!("{name}.csv"), "atom", mat)?;
        run.save_matrix(&format!("{name}.tns"), mat)?;
    }
    run.save_json("bic.json", &fit.bic)?;
    run.save_report(&fit.report)
}

#[derive(Serialize)]
struct TsvdSummary {
    tnn: f64,
    max_t_singular: f64,
    truncation_rank: Option<usize>,
}

fn tsvd(run: &mut Run) -> Result<(), CliError> {
    let rank: Option<usize> = match run.params.raw("rank") {
        Some(_) => Some(run.params.count("rank", 1)?),
        None => None,
    };
    let x = run.tensor("input")?;
    let f = t_svd(&x)?;
    run.save_tensor("u.tns", &f.u)?;
    run.save_tensor("d.tns", &f.d)?;
    run.save_tensor("v.tns", &f.v)?;
    if let Some(r) = rank {
        run.save_tensor("truncated.tns", &t_svd_truncate(&x, r)?)?;
    }
    let summary = TsvdSummary { tnn: tnn(&x)?, max_t_singular: max_t_singular(&x)?, truncation_rank: rank };
    run.save_json("summary.json", &summary)
}

fn select(run: &mut Run) -> Result<(), CliError> {
    let p = run.params.clone();
    match p.raw("target").unwrap_or("rank") {
        "rank" => {
            let r_max = p.count("r_max", 5)?;
            let d = RankSelectConfig::default();
            let cfg = RankSelectConfig {
                threshold: p.get("threshold", d.threshold)?,
                parafac: ParafacConfig { seed: run.seed, ..d.parafac.clone() },
                ..d
            };
            let x = run.tensor("input")?;
            let cons = mode_specs(&p, "constraints", x.order())?;
            let sel = select_rank(&x, r_max, &cons, &cfg)?;
            let table = Mat::from_fn(sel.table.len(), 4, |i, j| {
                let r = &sel.table[i];
                [r.rank as f64, r.corcondia, r.explained_variance, r.objective][j]
            });
            let mut buf = b"rank,corcondia,explained_variance,objective\n".to_vec();
            for i in 0..table.nrows() {
                let row: Vec<String> = (0..4).map(|j| format!("{:e}", table[(i, j)])).collect();
                buf.extend(row.join(",").as_bytes());
                buf.push(b'\n');
            }
            run.save_text("rank_table.csv", &buf)?;
            run.save_json("selection.json", &sel)
        }
        "eeg" => {
            let grid: Vec<f64> = p.list("grid", &[1e-3, 1e-2, 1e-1, 1.0])?;
            let lat = lattice(&p, &[10, 10, 5])?;
            let v = run.matrix("eeg")?;
            let k = run.matrix("lead_field")?;
            let lap = lat.laplacian();
            let cfg = AdmmConfig::default();
            let gs = grid_search(&[grid], |pt| {
                let s = eeg_inverse(&v, &k, &[Penalty::smooth(pt[0], lap.clone())], &cfg)?;
                Ok((s.x, s.report))
            })?;
            let mut buf = b"lambda,bic,dof,residual_norm2,error\n".to_vec();
            for row in &gs.table {
                let line = match &row.report {
                    Some(r) => format!("{:e},{:e},{:e},{:e},\n", row.params[0], r.bic, r.dof, r.residual_norm2),
                    None => format!("{:e},,,,{}\n", row.params[0], row.error.clone().unwrap_or_default().replace(',', ";")),
                };
                buf.extend(line.as_bytes());
            }
            run.save_text("grid.csv", &buf)?;
            run.save_matrix("sources.tns", &gs.best)?;
            run.save_report(&gs.best_report)
        }
        other => Err(CliError::Config(format!("unknown selection target '{other}' (rank | eeg)"))),
    }
}
