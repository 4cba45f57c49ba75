use std::path::Path;
use std::process::{Command, Output};

use multiway::io::{load_matrix, load_real};
use multiway::metrics::factor_congruence;
use multiway::KruskalModel;

fn multiway(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multiway")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_parafac_recovers_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let fit = dir.path().join("fit");
    ok(multiway(&["--seed", "3", "simulate", "--out", s(&sim), "--set", "kind=parafac"]));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("# round trip\n[parafac]\ninput = {}\nrank = 3\nconstraints = free, free, nonneg\n", s(&sim.join("data.tns"))),
    )
    .unwrap();
    ok(multiway(&["--seed", "3", "parafac", "--config", s(&cfg), "--out", s(&fit)]));
    let load = |d: &Path, stem: &str| -> Vec<_> { (0..3).map(|n| load_matrix(d.join(format!("{stem}{n}.tns"))).unwrap()).collect() };
    let truth = KruskalModel::new(load(&sim, "truth_factor")).unwrap();
    let est = KruskalModel::new(load(&fit, "factor")).unwrap();
    let (c, _) = factor_congruence(&est, &truth).unwrap();
    assert!(c > 0.95, "{c}");
    for f in ["manifest.json", "fit_report.json", "factor0.csv", "weights.csv"] {
        assert!(fit.join(f).is_file(), "{f}");
    }
    let manifest = std::fs::read_to_string(fit.join("manifest.json")).unwrap();
    assert!(manifest.contains("sha256") && manifest.contains("data.tns"));
    let csv = std::fs::read_to_string(fit.join("factor0.csv")).unwrap();
    assert!(csv.starts_with("atom1,atom2,atom3\n"));
}

#[test]
fn unknown_key_exits_with_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[parafac]\nrnak = 3\n").unwrap();
    let out = multiway(&["parafac", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rnak"));
}

#[test]
fn missing_input_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = multiway(&["tsvd", "--set", "input=/nonexistent/x.tns", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(multiway(&["--seed", "5", "simulate", "--out", s(&sim), "--set", "kind=coupled", "--set", "n_shared=30"]));
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("run{i}"));
            ok(multiway(&[
                "--seed", "9", "npls", "--out", s(&out),
                "--set", &format!("x={}", s(&sim.join("x.tns"))),
                "--set", &format!("y={}", s(&sim.join("y.tns"))),
                "--set", "rank=2", "--set", "permutations=20",
            ]));
            out
        })
        .collect();
    for f in ["x_scores.tns", "c.tns", "atoms.json", "manifest.json"] {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tnn_at_zero_matches_naive() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(multiway(&["--seed", "2", "simulate", "--out", s(&sim), "--set", "kind=mar", "--set", "lags=1", "--set", "n_times=2000"]));
    let input = format!("input={}", s(&sim.join("series.tns")));
    let (a, b) = (dir.path().join("naive"), dir.path().join("tnn"));
    ok(multiway(&["granger", "--method", "naive", "--set", &input, "--set", "lags=1", "--out", s(&a)]));
    ok(multiway(&["granger", "--method", "tnn", "--lambda", "0", "--set", &input, "--set", "lags=1", "--out", s(&b)]));
    let x = load_real(a.join("connectivity.tns")).unwrap();
    let y = load_real(b.join("connectivity.tns")).unwrap();
    let diff = x.sub(&y).unwrap().frobenius() / x.frobenius();
    assert!(diff < 1e-8, "{diff}");
    assert!(std::fs::read_to_string(a.join("edges.csv")).unwrap().starts_with("source,target,lag,weight,p_value"));
}

#[test]
fn bad_method_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(multiway(&["simulate", "--out", s(&sim), "--set", "kind=mar", "--set", "n_times=200"]));
    let out = multiway(&["granger", "--method", "magic", "--set", &format!("input={}", s(&sim.join("series.tns"))), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
