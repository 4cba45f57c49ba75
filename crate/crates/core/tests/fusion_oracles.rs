mod common;

use common::*;
use multiway::fusion::*;
use multiway::linalg::{Mat, Vector};
use multiway::synth::*;
use multiway::DenseTensor;
use rand::Rng;

fn unit(n: usize, r: &mut impl Rng) -> Vector {
    let v = Vector::from_fn(n, |_, _| r.random::<f64>() - 0.5);
    let nrm = v.norm();
    v / nrm
}

fn pair(independent: bool, rank: usize, seed: u64) -> CoupledPair {
    make_coupled_pair(&CoupledSpec {
        x_shape: [6, 7],
        n_shared: 40,
        y_rows: 8,
        rank,
        snr_db: 20.0,
        independent,
        seed,
    })
    .unwrap()
}

#[test]
fn first_npls_atom_beats_random_loadings() {
    let p = pair(false, 2, 71);
    let y = DenseTensor::from_matrix(&p.y);
    let cfg = NplsConfig { permutations: 0, ..NplsConfig::default() };
    let fit = npls(&p.x, &y, 1, &cfg).unwrap();
    let best = fit.atoms[0].covariance.abs();
    let n = 40;
    let mut r = rng(72);
    for _ in 0..200 {
        let (wa, wb, v) = (unit(6, &mut r), unit(7, &mut r), unit(8, &mut r));
        let mut cov = 0.0;
        for t in 0..n {
            let mut xs = 0.0;
            for i in 0..6 {
                for k in 0..7 {
                    xs += p.x.get(&[i, t, k]) * wa[i] * wb[k];
                }
            }
            let ys: f64 = (0..8).map(|j| p.y[(j, t)] * v[j]).sum();
            cov += xs * ys;
        }
        assert!((cov / n as f64).abs() <= best * (1.0 + 1e-9));
    }
    let a = &fit.atoms[0];
    for l in a.x_loadings.iter().chain(&a.y_loadings) {
        assert!((l.norm() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn rank_one_data_deflates_to_zero() {
    let mut r = rng(73);
    let (a, t, f, b) = (unit(5, &mut r), unit(30, &mut r), unit(4, &mut r), unit(6, &mut r));
    let x = multiway::KruskalModel::new(vec![
        Mat::from_column_slice(5, 1, a.as_slice()),
        Mat::from_column_slice(30, 1, t.as_slice()),
        Mat::from_column_slice(4, 1, f.as_slice()),
    ])
    .unwrap()
    .reconstruct();
    let y = DenseTensor::from_matrix(&(&b * t.transpose() * 3.0));
    let fit = npls(&x, &y, 1, &NplsConfig { permutations: 0, ..NplsConfig::default() }).unwrap();
    assert!(fit.x_residual.frobenius_sq().sqrt() < 1e-6 * x.frobenius_sq().sqrt());
    assert!(fit.y_residual.frobenius_sq().sqrt() < 1e-6 * y.frobenius_sq().sqrt());
    assert!((fit.atoms[0].correlation - 1.0).abs() < 1e-9);
}

#[test]
fn npls_permutation_separates_coupled_from_independent() {
    let cfg = NplsConfig { permutations: 99, seed: 5, ..NplsConfig::default() };
    let coupled = pair(false, 2, 74);
    let fit = npls(&coupled.x, &DenseTensor::from_matrix(&coupled.y), 1, &cfg).unwrap();
    assert!(fit.atoms[0].p_value.unwrap() <= 0.01 + 1e-12);
    assert_eq!(fit.t_x.shape(), (40, 1));
    let again = npls(&coupled.x, &DenseTensor::from_matrix(&coupled.y), 1, &cfg).unwrap();
    assert_eq!(fit.atoms[0].p_value, again.atoms[0].p_value);
}

#[test]
fn npls_rejects_mismatched_shared_mode() {
    let x = DenseTensor::zeros(&[3, 5, 2]);
    let y = DenseTensor::zeros(&[4, 6]);
    assert!(npls(&x, &y, 1, &NplsConfig::default()).is_err());
    assert!(npls(&x, &DenseTensor::zeros(&[4, 5]), 0, &NplsConfig::default()).is_err());
}

fn scene(seed: u64) -> CmtfScene {
    make_cmtf_scene(&CmtfSceneSpec {
        lattice: Lattice::new(&[6, 6]).unwrap(),
        common: vec![7],
        tensor_only: vec![22],
        matrix_only: vec![33],
        width: 1.0,
        n_sensors: 16,
        n_times: 20,
        n_freqs: 15,
        matrix_cols: 25,
        snr_db: 20.0,
        seed,
    })
    .unwrap()
}

fn ones() -> CmtfRanks {
    CmtfRanks { common: 1, tensor_only: 1, matrix_only: 1 }
}

fn gram_offdiag(m: &Mat) -> f64 {
    let g = m.transpose() * m;
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        worst = worst.max((g[(i, i)] - 1.0).abs());
        for j in 0..g.ncols() {
            if i != j {
                worst = worst.max(g[(i, j)].abs());
            }
        }
    }
    worst
}

#[test]
fn cmtf_satisfies_its_constraints() {
    let s = scene(75);
    let cfg = CmtfConfig { seed: 1, ..CmtfConfig::new(ones()) };
    let fit = cmtf(&s.tensor, &s.matrix, &s.lead_field, &cfg).unwrap();
    let m = &fit.model;
    assert!(gram_offdiag(&m.tensor_block()) < 1e-6);
    assert!(gram_offdiag(&m.matrix_block()) < 1e-6);
    for v in m.common.iter().chain(m.tensor_spatial.iter()).chain(m.matrix_spatial.iter()).chain(m.f_v.iter()) {
        assert!(*v >= 0.0);
    }
    // a node carrying the common atom carries no specific atom
    for i in 0..m.common.nrows() {
        if m.common[(i, 0)] > 0.0 {
            assert_eq!(m.tensor_spatial[(i, 0)], 0.0);
            assert_eq!(m.matrix_spatial[(i, 0)], 0.0);
        }
    }
    let tr = &fit.report.objective_trace;
    assert!(tr.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    let corr = multiway::linalg::pearson(m.common.column(0).as_slice(), s.common.column(0).as_slice());
    assert!(corr > 0.9, "{corr}");
}

#[test]
fn cmtf_is_invariant_to_matrix_scale() {
    let s = scene(76);
    let cfg = CmtfConfig { seed: 2, ..CmtfConfig::new(ones()) };
    let a = cmtf(&s.tensor, &s.matrix, &s.lead_field, &cfg).unwrap();
    let b = cmtf(&s.tensor, &(&s.matrix * 7.0), &s.lead_field, &cfg).unwrap();
    assert!((b.model.gamma * 49.0 - a.model.gamma).abs() < 1e-9 * a.model.gamma);
    assert!(rel_err(b.model.common.as_slice(), a.model.common.as_slice()) < 1e-6);
    assert!(rel_err(b.model.t_b.as_slice(), (&a.model.t_b * 7.0).as_slice()) < 1e-6);
}

#[test]
fn zero_gamma_ignores_the_matrix() {
    let s = scene(77);
    let cfg = CmtfConfig { seed: 3, gamma: Some(0.0), ..CmtfConfig::new(ones()) };
    let a = cmtf(&s.tensor, &s.matrix, &s.lead_field, &cfg).unwrap();
    let noise = gaussian_matrix(s.matrix.nrows(), s.matrix.ncols(), &mut rng(78));
    let b = cmtf(&s.tensor, &noise, &s.lead_field, &cfg).unwrap();
    assert!(rel_err(b.model.tensor_block().as_slice(), a.model.tensor_block().as_slice()) < 1e-8);
}

#[test]
fn cmtf_gradient_matches_finite_differences() {
    let s = scene(79);
    let lap = Lattice::new(&[6, 6]).unwrap().laplacian();
    let cfg = CmtfConfig {
        lambdas: [0.0, 0.3, 0.0, 0.2, 0.0, 0.5],
        laplacian: Some(lap),
        ..CmtfConfig::new(ones())
    };
    let mut r = rng(80);
    let n = s.lead_field.ncols();
    let model = CoupledModel {
        common: gaussian_matrix(n, 1, &mut r),
        tensor_spatial: gaussian_matrix(n, 1, &mut r),
        matrix_spatial: gaussian_matrix(n, 1, &mut r),
        t_v: gaussian_matrix(20, 2, &mut r),
        f_v: gaussian_matrix(15, 2, &mut r),
        t_b: gaussian_matrix(25, 2, &mut r),
        gamma: 0.7,
    };
    let (_, grads) = cmtf_smooth(&s.tensor, &s.matrix, &s.lead_field, &cfg, &model).unwrap();
    for (block, g) in grads.iter().enumerate() {
        let value = |m: &Mat| {
            let mut mm = model.clone();
            match block {
                0 => mm.common = m.clone(),
                1 => mm.tensor_spatial = m.clone(),
                _ => mm.matrix_spatial = m.clone(),
            }
            cmtf_smooth(&s.tensor, &s.matrix, &s.lead_field, &cfg, &mm).unwrap().0
        };
        let at = [&model.common, &model.tensor_spatial, &model.matrix_spatial][block];
        let fd = fd_gradient(value, at, 1e-5);
        assert!(rel_err(g.as_slice(), fd.as_slice()) < 1e-5, "block {block}");
    }
}

#[test]
fn bic_grid_returns_grid_members() {
    let s = scene(81);
    let lap = Lattice::new(&[6, 6]).unwrap().laplacian();
    let base = CmtfConfig { laplacian: Some(lap), max_sweeps: 100, seed: 4, ..CmtfConfig::new(ones()) };
    let grids = [vec![0.0, 0.1], vec![0.0], vec![0.0, 0.1], vec![0.0], vec![0.0], vec![0.0, 1.0]];
    let g = cmtf_bic_grid(&s.tensor, &s.matrix, &s.lead_field, &base, &grids).unwrap();
    assert_eq!(g.rows.len(), 8);
    for best in [&g.best_common, &g.best_tensor, &g.best_matrix] {
        assert!(g.rows.iter().any(|r| &r.lambdas == best));
    }
    let min_common = g.rows.iter().filter_map(|r| r.bic.map(|b| b.common)).fold(f64::INFINITY, f64::min);
    let at_best = g.rows.iter().find(|r| r.lambdas == g.best_common).unwrap().bic.unwrap().common;
    assert_eq!(min_common, at_best);
}

#[test]
fn logit_inverts_the_sigmoid() {
    let x = Mat::from_row_slice(1, 4, &[-3.0, -0.2, 0.0, 2.5]);
    let p = x.map(|v| 1.0 / (1.0 + (-v).exp()));
    assert!(rel_err(logit(&p).unwrap().as_slice(), x.as_slice()) < 1e-12);
    assert!(logit(&Mat::from_element(1, 1, 0.0)).is_err());
}
