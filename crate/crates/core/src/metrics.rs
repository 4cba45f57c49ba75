//! Recovery metrics for comparing estimated signatures with ground truth.

use crate::error::{shape_err, Result};
use crate::linalg::{congruence, Mat};
use crate::tensor::KruskalModel;

/// Greedy matching of estimated atoms to true atoms by the product of
/// per-mode congruences. `perm[t]` is the estimated column matched to true
/// column `t`. Requires at least as many estimated as true columns.
pub fn match_columns(est: &[&Mat], truth: &[&Mat]) -> Result<Vec<usize>> {
    if est.len() != truth.len() || est.is_empty() {
        return shape_err("estimated and true factor lists differ in length");
    }
    let re = est[0].ncols();
    let rt = truth[0].ncols();
    if re < rt {
        return shape_err(format!("{re} estimated atoms for {rt} true atoms"));
    }
    for (e, t) in est.iter().zip(truth) {
        if e.nrows() != t.nrows() || e.ncols() != re || t.ncols() != rt {
            return shape_err("factor shapes disagree");
        }
    }
    let mut score = Mat::from_element(re, rt, 1.0);
    for (e, t) in est.iter().zip(truth) {
        for i in 0..re {
            for j in 0..rt {
                score[(i, j)] *= congruence(e.column(i).as_slice(), t.column(j).as_slice());
            }
        }
    }
    let mut perm = vec![usize::MAX; rt];
    let mut used = vec![false; re];
    for _ in 0..rt {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in (0..re).filter(|&i| !used[i]) {
            for j in (0..rt).filter(|&j| perm[j] == usize::MAX) {
                if score[(i, j)] > best.0 {
                    best = (score[(i, j)], i, j);
                }
            }
        }
        used[best.1] = true;
        perm[best.2] = best.1;
    }
    Ok(perm)
}

/// Mean congruence over modes and atoms after greedy alignment.
pub fn factor_congruence(est: &KruskalModel, truth: &KruskalModel) -> Result<(f64, Vec<usize>)> {
    let e: Vec<&Mat> = est.factors.iter().collect();
    let t: Vec<&Mat> = truth.factors.iter().collect();
    let perm = match_columns(&e, &t)?;
    let mut total = 0.0;
    for (ef, tf) in e.iter().zip(&t) {
        for (j, &i) in perm.iter().enumerate() {
            total += congruence(ef.column(i).as_slice(), tf.column(j).as_slice());
        }
    }
    Ok((total / (perm.len() * e.len()).max(1) as f64, perm))
}

/// Entries with magnitude above `rel · max|v|`.
pub fn support(v: &[f64], rel: f64) -> Vec<bool> {
    let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    v.iter().map(|x| m > 0.0 && x.abs() > rel * m).collect()
}

pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Index of the largest entry (first on ties); `None` for an empty slice.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Signal-to-noise ratio in dB.
pub fn snr_db(signal_power: f64, noise_power: f64) -> f64 {
    10.0 * (signal_power / noise_power).log10()
}
