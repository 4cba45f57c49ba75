mod common;

use common::*;
use multiway::granger::*;
use multiway::linalg::{kron, Mat, Vector};
use multiway::penalties::{path_laplacian, AdmmConfig};
use multiway::synth::*;
use multiway::DenseTensor;

/// Population autocovariances `Γ(k) = E[b_t b_{t−k}ᵀ]`, `k = 0..=lags`, from
/// the discrete Lyapunov equation of the companion form.
fn population_autocov(a: &DenseTensor, sigma2: f64) -> Vec<Mat> {
    let (n, p) = (a.shape()[0], a.shape()[2]);
    let d = n * p;
    let mut f = Mat::zeros(d, d);
    for l in 0..p {
        f.view_mut((0, l * n), (n, n)).copy_from(&a.face(l).unwrap());
    }
    for l in 1..p {
        f.view_mut((l * n, (l - 1) * n), (n, n)).copy_from(&Mat::identity(n, n));
    }
    let mut q = Mat::zeros(d, d);
    q.view_mut((0, 0), (n, n)).copy_from(&(Mat::identity(n, n) * sigma2));
    let sys = Mat::identity(d * d, d * d) - kron(&f, &f);
    let vec_q = Vector::from_column_slice(q.as_slice());
    let vec_s = sys.lu().solve(&vec_q).unwrap();
    let s = Mat::from_column_slice(d, d, vec_s.as_slice());
    let mut gam: Vec<Mat> = (0..p).map(|k| s.view((0, k * n), (n, n)).into_owned()).collect();
    // Γ(p) = Σ_l A_l Γ(p − l)
    let mut next = Mat::zeros(n, n);
    for l in 1..=p {
        next += a.face(l - 1).unwrap() * &gam[p - l];
    }
    gam.push(next);
    gam
}

/// Covariance tensor in the layout of `sample_cov_tensor`: face `m` is
/// `E[b_{t−m} b_tᵀ] = Γ(m)ᵀ`.
fn population_cov_tensor(gam: &[Mat]) -> DenseTensor {
    let faces: Vec<Mat> = gam.iter().map(|g| g.transpose()).collect();
    DenseTensor::from_faces(&faces).unwrap()
}

#[test]
fn prediction_equals_loop_sum() {
    let mut r = rng(60);
    let series = gaussian_matrix(4, 30, &mut r);
    let lags = 3;
    let a = random_tensor(&[4, 4, lags], &mut r);
    let sys = build_lagged(&series, lags).unwrap();
    let got = predict(&a, &sys).unwrap();
    let t_eff = 30 - lags;
    let mut want = Mat::zeros(4, t_eff);
    for t in 0..t_eff {
        let tt = t + lags;
        for i in 0..4 {
            let mut acc = 0.0;
            for l in 0..lags {
                for j in 0..4 {
                    acc += a.get(&[i, j, l]) * series[(j, tt - l - 1)];
                }
            }
            want[(i, t)] = acc;
        }
    }
    assert!(rel_err(got.as_slice(), want.as_slice()) < 1e-12);
    let design = sys.design();
    assert_eq!(design.shape(), (t_eff, 4 * lags));
}

#[test]
fn levinson_naive_is_exact_on_population_covariances() {
    for seed in 0..3 {
        let a = random_mar(3, 2, 0.5, 0.7, 61 + seed).unwrap();
        let gam = population_autocov(&a, 1.0);
        let est = levinson_naive(&population_cov_tensor(&gam)).unwrap();
        assert!(rel_err(est.data(), a.data()) < 1e-10);
    }
}

#[test]
fn ar1_autocovariance_oracle() {
    let a = DenseTensor::new(vec![1, 1, 1], vec![0.6]).unwrap();
    let gam = population_autocov(&a, 1.0);
    assert!((gam[0][(0, 0)] - 1.0 / (1.0 - 0.36)).abs() < 1e-12);
    assert!((gam[1][(0, 0)] - 0.6 / (1.0 - 0.36)).abs() < 1e-12);
    let est = levinson_naive(&population_cov_tensor(&gam)).unwrap();
    assert!((est.data()[0] - 0.6).abs() < 1e-12);
}

#[test]
fn least_squares_and_yule_walker_agree_on_long_series() {
    let a = random_mar(4, 2, 0.5, 0.8, 64).unwrap();
    let s = demean(&simulate_mar(&a, 1.0, 20_000, 65).unwrap());
    let sys = build_lagged(&s, 2).unwrap();
    let ls = mar_tensor_fit(&sys, &[], &AdmmConfig::default()).unwrap();
    let yw = levinson_naive(&sample_cov_tensor(&sys)).unwrap();
    assert!(rel_err(yw.data(), ls.connectivity.data()) < 1e-2);
    assert!(rel_err(ls.connectivity.data(), a.data()) < 0.1);
}

#[test]
fn tnn_solution_is_continuous_at_zero() {
    let a = random_mar(5, 3, 0.4, 0.7, 66).unwrap();
    let s = demean(&simulate_mar(&a, 1.0, 400, 67).unwrap());
    let r = sample_cov_tensor(&build_lagged(&s, 3).unwrap());
    let base = levinson_tnn(&r, 0.0).unwrap();
    let near = levinson_tnn(&r, 1e-9).unwrap();
    assert!(rel_err(near.data(), base.data()) < 1e-6);
    assert!(base.data().iter().all(|v| v.is_finite()));
}

#[test]
fn tnn_at_zero_equals_naive_for_one_lag() {
    let a = random_mar(6, 1, 0.5, 0.8, 71).unwrap();
    let s = demean(&simulate_mar(&a, 1.0, 3000, 72).unwrap());
    let r = sample_cov_tensor(&build_lagged(&s, 1).unwrap());
    let naive = levinson_naive(&r).unwrap();
    let tnn = levinson_tnn(&r, 0.0).unwrap();
    assert!(rel_err(tnn.data(), naive.data()) < 1e-6);
    let big = levinson_tnn(&r, 1e6).unwrap();
    assert!(big.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bivariate_detects_a_strong_directed_link() {
    let mut a = DenseTensor::zeros(&[2, 2, 1]);
    a.set(&[0, 0, 0], 0.3);
    a.set(&[1, 1, 0], 0.3);
    a.set(&[1, 0, 0], 0.6);
    let s = simulate_mar(&a, 1.0, 1000, 68).unwrap();
    let gc = bivariate_gc(&s, 1, 0.05).unwrap();
    assert!(gc.significant[1][0]);
    assert!(!gc.significant[0][1]);
    assert!(gc.dominant_flow[(1, 0)] > 0.0);
    let edges = bivariate_edges(&gc, 1);
    assert!(edges.iter().any(|e| e.source == 0 && e.target == 1));
}

#[test]
fn gc_parafac_gradient_matches_finite_differences() {
    let mut r = rng(69);
    let s = gaussian_matrix(6, 60, &mut r);
    let sys = build_lagged(&s, 3).unwrap();
    let cfg = GcParafacConfig::smooth_lasso(&path_laplacian(6), &path_laplacian(3), [0.1, 0.3, 0.1, 0.2, 0.0, 0.4]);
    let f = [gaussian_matrix(6, 2, &mut r), gaussian_matrix(6, 2, &mut r), gaussian_matrix(3, 2, &mut r)];
    let w = Vector::from_vec(vec![0.7, 1.3]);
    for block in 0..3 {
        let (_, g) = gc_parafac_smooth(&sys, &cfg, [&f[0], &f[1], &f[2]], &w, block).unwrap();
        let value = |m: &Mat| {
            let mut ff = f.clone();
            ff[block] = m.clone();
            gc_parafac_smooth(&sys, &cfg, [&ff[0], &ff[1], &ff[2]], &w, block).unwrap().0
        };
        let fd = fd_gradient(value, &f[block], 1e-5);
        assert!(rel_err(g.as_slice(), fd.as_slice()) < 1e-5, "block {block}");
    }
}

#[test]
fn gc_parafac_recovers_a_single_planted_pair() {
    let a = planted_cluster_mar(12, &[vec![0, 1]], &[vec![8, 9]], &[vec![1.2, 0.6]], 0.0).unwrap();
    let s = demean(&simulate_mar(&a, 1.0, 1500, 70).unwrap());
    let sys = build_lagged(&s, 2).unwrap();
    let fit = gc_parafac(&sys, 1, &GcParafacConfig { tol: 1e-7, ..GcParafacConfig::default() }).unwrap();
    let sender = multiway::metrics::support(fit.sender.column(0).as_slice(), 0.1);
    let receiver = multiway::metrics::support(fit.receiver.column(0).as_slice(), 0.1);
    let truth_s: Vec<bool> = (0..12).map(|i| i < 2).collect();
    let truth_r: Vec<bool> = (0..12).map(|i| i >= 8 && i < 10).collect();
    assert_eq!(sender, truth_s);
    assert_eq!(receiver, truth_r);
    let tr = &fit.report.objective_trace;
    assert!(tr.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-10)));
}

#[test]
fn edges_from_connectivity() {
    let mut a = DenseTensor::zeros(&[3, 3, 2]);
    a.set(&[2, 0, 1], -0.5);
    a.set(&[1, 1, 0], 1e-12);
    let edges = connectivity_edges(&a, 1e-6).unwrap();
    assert_eq!(edges.len(), 1);
    assert_eq!((edges[0].source, edges[0].target, edges[0].lag), (0, 2, 2));
    let mut buf = Vec::new();
    write_edges_csv(&mut buf, &edges).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("source,target,lag,weight,p_value\n"));
}
