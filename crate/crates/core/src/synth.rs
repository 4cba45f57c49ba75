//! Ground-truth generators: lattices, lead fields, planted atoms, forward-model
//! data, spectral tensors and stable autoregressive systems.
//!
//! Every generator is a pure function of its arguments and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{sym_eigen, Mat, Vector};
use crate::penalties::graph_laplacian;
use crate::tensor::{DenseTensor, KruskalModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Regular 1-, 2- or 3-D lattice with unit spacing and nearest-neighbour edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub dims: Vec<usize>,
}

impl Lattice {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || dims.iter().any(|&d| d == 0) {
            return arg_err(format!("lattice dims must be 1 to 3 positive extents, got {dims:?}"));
        }
        Ok(Self { dims: dims.to_vec() })
    }

    pub fn n_nodes(&self) -> usize {
        self.dims.iter().product()
    }

    /// Coordinates of node `i` (first dimension fastest).
    pub fn coords(&self, i: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        let mut rem = i;
        for (k, &d) in self.dims.iter().enumerate() {
            c[k] = (rem % d) as f64;
            rem /= d;
        }
        c
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords(i), self.coords(j));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    pub fn adjacency(&self) -> Mat {
        let n = self.n_nodes();
        let mut w = Mat::zeros(n, n);
        let mut stride = 1;
        for &d in &self.dims {
            for i in 0..n {
                if (i / stride) % d + 1 < d {
                    w[(i, i + stride)] = 1.0;
                    w[(i + stride, i)] = 1.0;
                }
            }
            stride *= d;
        }
        w
    }

    pub fn laplacian(&self) -> Mat {
        graph_laplacian(&self.adjacency()).expect("lattice adjacency is valid")
    }

    /// Truncated Gaussian bump centred on node `center`, unit norm, zero beyond
    /// `3·width`.
    pub fn blob(&self, center: usize, width: f64) -> Vector {
        let v = Vector::from_iterator(
            self.n_nodes(),
            (0..self.n_nodes()).map(|i| {
                let d = self.distance(i, center);
                if d > 3.0 * width {
                    0.0
                } else {
                    (-d * d / (2.0 * width * width)).exp()
                }
            }),
        );
        let n = v.norm();
        v / n
    }
}

/// Gaussian smearing lead field: sensors at random positions inside the
/// lattice's bounding box, row `e` is `exp(−d²/(2w²))` over nodes, unit row
/// norms.
pub fn lead_field(lattice: &Lattice, n_sensors: usize, width: f64, seed: u64) -> Result<Mat> {
    if n_sensors == 0 || !(width > 0.0) {
        return arg_err("lead field needs sensors and a positive width");
    }
    let mut r = rng(seed);
    let mut k = Mat::zeros(n_sensors, lattice.n_nodes());
    for e in 0..n_sensors {
        let mut pos = [0.0; 3];
        for (d, &ext) in lattice.dims.iter().enumerate() {
            pos[d] = r.random::<f64>() * (ext as f64 - 1.0);
        }
        for i in 0..lattice.n_nodes() {
            let c = lattice.coords(i);
            let d2 = (c[0] - pos[0]).powi(2) + (c[1] - pos[1]).powi(2) + (c[2] - pos[2]).powi(2);
            k[(e, i)] = (-d2 / (2.0 * width * width)).exp();
        }
        let n = k.row(e).norm();
        k.row_mut(e).scale_mut(1.0 / n);
    }
    Ok(k)
}

/// Noise scaled so that `10·log10(‖signal‖²/‖noise‖²)` equals `snr_db`
/// exactly. Infinite SNR gives zeros.
pub fn noise_like(signal: &[f64], snr_db: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..signal.len()).map(|_| StandardNormal.sample(rng)).collect();
    if snr_db.is_infinite() && snr_db > 0.0 {
        return vec![0.0; signal.len()];
    }
    let ps: f64 = signal.iter().map(|v| v * v).sum();
    let pn: f64 = raw.iter().map(|v| v * v).sum();
    if ps == 0.0 {
        return raw;
    }
    let target = ps / 10f64.powf(snr_db / 10.0);
    let s = (target / pn).sqrt();
    raw.into_iter().map(|v| v * s).collect()
}

pub fn add_noise(m: &Mat, snr_db: f64, rng: &mut ChaCha8Rng) -> Mat {
    let n = noise_like(m.as_slice(), snr_db, rng);
    m + Mat::from_column_slice(m.nrows(), m.ncols(), &n)
}

pub fn add_noise_tensor(x: &DenseTensor, snr_db: f64, rng: &mut ChaCha8Rng) -> DenseTensor {
    let n = noise_like(x.data(), snr_db, rng);
    let data = x.data().iter().zip(n).map(|(a, b)| a + b).collect();
    DenseTensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Random rank-`R` Kruskal model with unit-norm Gaussian columns (absolute
/// values in the modes flagged nonnegative) and the given weights.
pub fn random_kruskal(shape: &[usize], weights: &[f64], nonneg: &[bool], seed: u64) -> Result<KruskalModel> {
    if nonneg.len() != shape.len() {
        return shape_err("one nonnegativity flag per mode is required");
    }
    let mut r = rng(seed);
    let rank = weights.len();
    let factors = shape
        .iter()
        .zip(nonneg)
        .map(|(&d, &nn)| {
            let mut f = gaussian_matrix(d, rank, &mut r);
            if nn {
                f = f.abs();
            }
            for c in 0..rank {
                let n = f.column(c).norm();
                f.column_mut(c).scale_mut(1.0 / n);
            }
            f
        })
        .collect();
    let mut m = KruskalModel::with_weights(factors, Vector::from_column_slice(weights))?;
    m.normalized = true;
    Ok(m)
}

/// Spectral profile of an atom.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralProfile {
    /// alpha-like oscillation at the given frequency
    Peak { hz: f64 },
    /// broadband 1/f process
    OneOverF,
}

#[derive(Debug, Clone)]
pub struct AtomSpec {
    pub center: usize,
    pub width: f64,
    pub profile: SpectralProfile,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub lattice: Lattice,
    pub atoms: Vec<AtomSpec>,
    pub n_times: usize,
    pub rate_hz: f64,
    pub snr_db: f64,
    pub seed: u64,
}

/// Planted ground truth: nonnegative unit spatial maps and unit time courses.
#[derive(Debug, Clone)]
pub struct PlantedScene {
    pub spec: SceneSpec,
    /// nodes × R
    pub spatial: Mat,
    /// time × R
    pub temporal: Mat,
}

impl PlantedScene {
    /// Source activity `G = spatial · temporalᵀ`.
    pub fn sources(&self) -> Mat {
        &self.spatial * self.temporal.transpose()
    }
}

fn smooth_envelope(n: usize, span: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n + span).map(|_| StandardNormal.sample(rng)).collect();
    let mut env = Vec::with_capacity(n);
    for t in 0..n {
        let s: f64 = raw[t..t + span].iter().sum::<f64>() / span as f64;
        env.push(1.0 + s.abs() * 2.0);
    }
    env
}

/// `1/f`-shaped Gaussian noise of length `n`.
pub fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64;
        *v /= (f.max(1.0)).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Builds a scene. Zero atoms give empty factor matrices.
pub fn make_scene(spec: &SceneSpec) -> Result<PlantedScene> {
    if spec.n_times == 0 || !(spec.rate_hz > 0.0) {
        return arg_err("scene needs samples and a positive rate");
    }
    let n = spec.lattice.n_nodes();
    let r_atoms = spec.atoms.len();
    let mut r = rng(spec.seed);
    let mut spatial = Mat::zeros(n, r_atoms);
    let mut temporal = Mat::zeros(spec.n_times, r_atoms);
    for (k, atom) in spec.atoms.iter().enumerate() {
        if atom.center >= n {
            return arg_err(format!("atom centre {} outside the lattice", atom.center));
        }
        spatial.set_column(k, &spec.lattice.blob(atom.center, atom.width));
        let series: Vec<f64> = match atom.profile {
            SpectralProfile::Peak { hz } => {
                let env = smooth_envelope(spec.n_times, (spec.rate_hz as usize).max(2), &mut r);
                let phase = r.random::<f64>() * std::f64::consts::TAU;
                (0..spec.n_times)
                    .map(|t| env[t] * (std::f64::consts::TAU * hz * t as f64 / spec.rate_hz + phase).sin())
                    .collect()
            }
            SpectralProfile::OneOverF => pink_noise(spec.n_times, &mut r),
        };
        let v = Vector::from_vec(series);
        temporal.set_column(k, &(&v / v.norm()));
    }
    Ok(PlantedScene {
        spec: spec.clone(),
        spatial,
        temporal,
    })
}

/// Simulated EEG: `V = K G + ε` at the scene SNR.
#[derive(Debug, Clone)]
pub struct EegData {
    pub v: Mat,
    pub clean: Mat,
    pub sources: Mat,
}

pub fn simulate_eeg(scene: &PlantedScene, lead_field: &Mat) -> Result<EegData> {
    if lead_field.ncols() != scene.spatial.nrows() {
        return shape_err("lead field columns and lattice nodes differ");
    }
    let g = scene.sources();
    let clean = lead_field * &g;
    let mut r = rng(scene.spec.seed.wrapping_add(0x5eed));
    let v = add_noise(&clean, scene.spec.snr_db, &mut r);
    Ok(EegData { v, clean, sources: g })
}

/// Simulated BOLD: `B = Γ H + ε`.
pub fn simulate_fmri(gamma: &Mat, h: &Mat, snr_db: f64, seed: u64) -> Result<(Mat, Mat)> {
    if gamma.ncols() != h.nrows() {
        return shape_err("source samples and hemodynamic rows differ");
    }
    let clean = gamma * h;
    let b = add_noise(&clean, snr_db, &mut rng(seed));
    Ok((b, clean))
}

/// 0/1 boxcar: `on` samples active, `off` samples rest, starting at rest.
pub fn boxcar(n: usize, on: usize, off: usize) -> Vec<f64> {
    let period = (on + off).max(1);
    (0..n).map(|t| if t % period >= off { 1.0 } else { 0.0 }).collect()
}

/// Window taper for spectral estimation.
#[derive(Debug, Clone, PartialEq)]
pub enum Taper {
    Hann,
    /// Thomson multitaper with time-bandwidth `nw` and `k` Slepian tapers
    Multitaper { nw: f64, k: usize },
}

#[derive(Debug, Clone)]
pub struct WindowSpec {
    pub len: usize,
    pub hop: usize,
    pub taper: Taper,
    pub rate_hz: f64,
}

/// Discrete prolate spheroidal sequences as the leading eigenvectors of the
/// standard tridiagonal commuting matrix.
pub fn dpss(n: usize, nw: f64, k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k > n || !(nw > 0.0) {
        return arg_err("dpss needs 1 ≤ k ≤ n and nw > 0");
    }
    let w = nw / n as f64;
    let mut t = Mat::zeros(n, n);
    for i in 0..n {
        let x = (n as f64 - 1.0 - 2.0 * i as f64) / 2.0;
        t[(i, i)] = x * x * (std::f64::consts::TAU * w).cos();
        if i + 1 < n {
            let off = (i + 1) as f64 * (n - i - 1) as f64 / 2.0;
            t[(i, i + 1)] = off;
            t[(i + 1, i)] = off;
        }
    }
    let (_, vecs) = sym_eigen(&t);
    Ok((0..k)
        .map(|j| {
            let mut v: Vec<f64> = vecs.column(j).iter().copied().collect();
            let s: f64 = v.iter().sum();
            if s < 0.0 || (s.abs() < 1e-12 && v[1] - v[0] < 0.0) {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect())
}

fn tapers(spec: &WindowSpec) -> Result<Vec<Vec<f64>>> {
    match spec.taper {
        Taper::Hann => {
            let n = spec.len as f64;
            let w: Vec<f64> = (0..spec.len)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n).cos())
                .collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(vec![w.into_iter().map(|v| v / norm).collect()])
        }
        Taper::Multitaper { nw, k } => dpss(spec.len, nw, k),
    }
}

/// Short-time power spectra of every row of `v`: an `I_E × frames × (len/2+1)`
/// nonnegative tensor and the bin frequencies in Hz. Tapers have unit energy;
/// multitaper estimates average the tapered periodograms.
pub fn spectral_tensor(v: &Mat, spec: &WindowSpec) -> Result<(DenseTensor, Vec<f64>)> {
    let (n_ch, n_t) = v.shape();
    if spec.len == 0 || spec.hop == 0 {
        return arg_err("window length and hop must be positive");
    }
    if spec.len > n_t {
        return arg_err(format!("window of {} samples exceeds the {n_t}-sample series", spec.len));
    }
    let tapers = tapers(spec)?;
    let frames = (n_t - spec.len) / spec.hop + 1;
    let n_f = spec.len / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(spec.len);
    let mut out = DenseTensor::zeros(&[n_ch, frames, n_f]);
    let mut buf = vec![Complex64::new(0.0, 0.0); spec.len];
    for c in 0..n_ch {
        for fr in 0..frames {
            let start = fr * spec.hop;
            for taper in &tapers {
                for i in 0..spec.len {
                    buf[i] = Complex64::new(v[(c, start + i)] * taper[i], 0.0);
                }
                fft.process(&mut buf);
                for f in 0..n_f {
                    let idx = out.linear_index(&[c, fr, f]);
                    out.data_mut()[idx] += buf[f].norm_sqr() / tapers.len() as f64;
                }
            }
        }
    }
    let freqs = (0..n_f).map(|f| f as f64 * spec.rate_hz / spec.len as f64).collect();
    Ok((out, freqs))
}

/// Largest eigenvalue magnitude of the companion matrix of a MAR system with
/// faces `A(:, :, l)` (lag `l+1`). Falls back to a Gelfand-formula bound when
/// the Schur iteration does not converge.
pub fn companion_radius(a: &DenseTensor) -> Result<f64> {
    if a.order() != 3 || a.shape()[0] != a.shape()[1] {
        return shape_err("connectivity tensor must be I × I × lags");
    }
    let (n, lags) = (a.shape()[0], a.shape()[2]);
    let mut c = Mat::zeros(n * lags, n * lags);
    for l in 0..lags {
        c.view_mut((0, l * n), (n, n)).copy_from(&a.face(l)?);
    }
    for i in 0..n * (lags - 1) {
        c[(n + i, i)] = 1.0;
    }
    let size = c.nrows();
    if let Some(schur) = nalgebra::linalg::Schur::try_new(c.clone(), f64::EPSILON, 30 * size.max(10)) {
        return Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max));
    }
    Ok(gelfand_radius(c, 12))
}

/// `‖C^(2^k)‖^(1/2^k)` with rescaling; an upper bound that tightens with `k`.
fn gelfand_radius(mut m: Mat, squarings: usize) -> f64 {
    let mut log_scale = 0.0;
    let s = m.norm();
    if s == 0.0 {
        return 0.0;
    }
    m /= s;
    log_scale += s.ln();
    for _ in 0..squarings {
        m = &m * &m;
        log_scale *= 2.0;
        let s = m.norm();
        if s == 0.0 {
            return 0.0;
        }
        m /= s;
        log_scale += s.ln();
    }
    (log_scale / (1u64 << squarings) as f64).exp()
}

/// Series from `b_t = Σ_l A_l b_{t−l} + e_t` with `e_t ~ N(0, σ² I)`; the first
/// `10·lags` samples are discarded as burn-in. Returns `I × T`.
pub fn simulate_mar(a: &DenseTensor, sigma: f64, n_times: usize, seed: u64) -> Result<Mat> {
    let radius = companion_radius(a)?;
    if radius >= 0.95 {
        return Err(Error::InvalidArgument(format!(
            "companion spectral radius {radius:.4} is not below 0.95"
        )));
    }
    let (n, lags) = (a.shape()[0], a.shape()[2]);
    let faces: Vec<Mat> = (0..lags).map(|l| a.face(l)).collect::<Result<_>>()?;
    let burn = 10 * lags;
    let total = n_times + burn;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut r = rng(seed);
    let mut b = Mat::zeros(n, total);
    for t in 0..total {
        let mut x = Vector::from_fn(n, |_, _| normal.sample(&mut r));
        for (l, f) in faces.iter().enumerate() {
            if t > l {
                x += f * b.column(t - l - 1);
            }
        }
        b.set_column(t, &x);
    }
    Ok(b.columns(burn, n_times).into_owned())
}

/// Random sparse MAR tensor rescaled to the requested companion radius.
pub fn random_mar(n: usize, lags: usize, density: f64, radius: f64, seed: u64) -> Result<DenseTensor> {
    if n == 0 || lags == 0 {
        return arg_err("MAR system needs nodes and lags");
    }
    let mut r = rng(seed);
    let mut a = DenseTensor::from_fn(&[n, n, lags], |idx| {
        if idx[0] == idx[1] || r.random::<f64>() < density {
            StandardNormal.sample(&mut r)
        } else {
            0.0
        }
    });
    let rho = companion_radius(&a)?;
    if rho == 0.0 {
        return Ok(a);
    }
    for l in 0..lags {
        let s = (radius / rho).powi(l as i32 + 1);
        for i in 0..n {
            for j in 0..n {
                let v = a.get(&[i, j, l]);
                a.set(&[i, j, l], v * s);
            }
        }
    }
    Ok(a)
}

/// Settings for a pair of datasets sharing one mode.
#[derive(Debug, Clone)]
pub struct CoupledSpec {
    /// `X` is `x_shape[0] × n_shared × x_shape[1]`
    pub x_shape: [usize; 2],
    pub n_shared: usize,
    /// rows of `Y`; `Y` is `y_rows × n_shared`
    pub y_rows: usize,
    pub rank: usize,
    pub snr_db: f64,
    /// generate `Y` from signatures unrelated to `X`
    pub independent: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CoupledPair {
    pub x: DenseTensor,
    pub y: Mat,
    pub x_truth: KruskalModel,
    /// `Y = y_loadings · y_sharedᵀ`
    pub y_loadings: Mat,
    pub y_shared: Mat,
}

/// Tensor `X = [[A, T, F]]` and matrix `Y = B Tᵀ` driven by the same shared
/// signatures `T` (or by independent ones).
pub fn make_coupled_pair(spec: &CoupledSpec) -> Result<CoupledPair> {
    let weights: Vec<f64> = (0..spec.rank).map(|r| 1.0 + 0.5 * r as f64).collect();
    let shape = [spec.x_shape[0], spec.n_shared, spec.x_shape[1]];
    let x_truth = random_kruskal(&shape, &weights, &[false, false, true], spec.seed)?;
    let mut r = rng(spec.seed.wrapping_add(0xc0));
    let shared = if spec.independent {
        let mut t = gaussian_matrix(spec.n_shared, spec.rank, &mut r);
        for c in 0..spec.rank {
            let n = t.column(c).norm();
            t.column_mut(c).scale_mut(1.0 / n);
        }
        t
    } else {
        x_truth.factors[1].clone()
    };
    let mut loadings = gaussian_matrix(spec.y_rows, spec.rank, &mut r);
    for c in 0..spec.rank {
        let n = loadings.column(c).norm();
        loadings.column_mut(c).scale_mut(weights[c] / n);
    }
    let clean_y = &loadings * shared.transpose();
    let x = add_noise_tensor(&x_truth.reconstruct(), spec.snr_db, &mut r);
    let y = add_noise(&clean_y, spec.snr_db, &mut r);
    Ok(CoupledPair {
        x,
        y,
        x_truth,
        y_loadings: loadings,
        y_shared: shared,
    })
}

/// Settings for a planted coupled tensor-matrix scene.
#[derive(Debug, Clone)]
pub struct CmtfSceneSpec {
    pub lattice: Lattice,
    /// spatial blob centres of the common, tensor-only and matrix-only atoms
    pub common: Vec<usize>,
    pub tensor_only: Vec<usize>,
    pub matrix_only: Vec<usize>,
    pub width: f64,
    pub n_sensors: usize,
    pub n_times: usize,
    pub n_freqs: usize,
    /// columns of the matrix side
    pub matrix_cols: usize,
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CmtfScene {
    pub lead_field: Mat,
    /// sensors × times × freqs
    pub tensor: DenseTensor,
    /// nodes × matrix_cols
    pub matrix: Mat,
    pub common: Mat,
    pub tensor_spatial: Mat,
    pub matrix_spatial: Mat,
    pub t_v: Mat,
    pub f_v: Mat,
    pub t_b: Mat,
}

/// `S = [[K[M_C, M_G], T_V, F_V]] + ε` and `B = [M_C, M_B] T_Bᵀ + ε`.
/// Spatial maps are truncated blobs; overlapping supports are resolved in
/// favour of the earlier atom so the blocks are orthogonal.
pub fn make_cmtf_scene(spec: &CmtfSceneSpec) -> Result<CmtfScene> {
    let n = spec.lattice.n_nodes();
    let centres: Vec<usize> = spec.common.iter().chain(&spec.tensor_only).chain(&spec.matrix_only).copied().collect();
    if spec.common.is_empty() || centres.iter().any(|&c| c >= n) {
        return arg_err("scene needs a common atom and centres on the lattice");
    }
    let mut owned = vec![false; n];
    let mut maps = Vec::with_capacity(centres.len());
    for &c in &centres {
        let mut b = spec.lattice.blob(c, spec.width);
        for i in 0..n {
            if owned[i] {
                b[i] = 0.0;
            } else if b[i] > 0.0 {
                owned[i] = true;
            }
        }
        let norm = b.norm();
        maps.push(b / norm);
    }
    let (rc, rg, rb) = (spec.common.len(), spec.tensor_only.len(), spec.matrix_only.len());
    let block = |range: std::ops::Range<usize>| Mat::from_fn(n, range.len(), |i, j| maps[range.start + j][i]);
    let common = block(0..rc);
    let tensor_spatial = block(rc..rc + rg);
    let matrix_spatial = block(rc + rg..rc + rg + rb);

    let lead_field = lead_field(&spec.lattice, spec.n_sensors, 2.0 * spec.width, spec.seed)?;
    let mut r = rng(spec.seed.wrapping_add(0xc3f));
    let rt = rc + rg;
    let t_v = gaussian_matrix(spec.n_times, rt, &mut r);
    let mut f_v = Mat::zeros(spec.n_freqs, rt);
    for c in 0..rt {
        let peak = (c as f64 + 0.5) * spec.n_freqs as f64 / rt as f64;
        let w = (spec.n_freqs as f64 / (4.0 * rt as f64)).max(1.0);
        for f in 0..spec.n_freqs {
            f_v[(f, c)] = (-(f as f64 - peak).powi(2) / (2.0 * w * w)).exp();
        }
        let norm = f_v.column(c).norm();
        f_v.column_mut(c).scale_mut(1.0 / norm);
    }
    let t_b = gaussian_matrix(spec.matrix_cols, rc + rb, &mut r);
    let m_t = hstack(&common, &tensor_spatial);
    let m_b = hstack(&common, &matrix_spatial);
    let clean = KruskalModel::new(vec![&lead_field * &m_t, t_v.clone(), f_v.clone()])?.reconstruct();
    let tensor = add_noise_tensor(&clean, spec.snr_db, &mut r);
    let matrix = add_noise(&(&m_b * t_b.transpose()), spec.snr_db, &mut r);
    Ok(CmtfScene {
        lead_field,
        tensor,
        matrix,
        common,
        tensor_spatial,
        matrix_spatial,
        t_v,
        f_v,
        t_b,
    })
}

fn hstack(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}
