//! Challenge metrics: RMSE, Pearson, Spearman, within-tolerance accuracy,
//! plus macro-F1 for dev-set model selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{LEVEL_STEP, MAX_LEVEL, MIN_LEVEL};

/// The five leaderboard metrics for one system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub pcc: f64,
    pub src: f64,
    /// Percentage of pairs with |pred - ref| <= 0.5.
    pub within_half: f64,
    /// Percentage of pairs with |pred - ref| <= 1.0.
    pub within_one: f64,
    pub n: usize,
}

fn check_pair(pred: &[f64], reference: &[f64]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = pred.iter().chain(reference).find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore(bad));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    let sse: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r) * (p - r))
        .sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Pearson correlation. Uses the population (1/n) form for covariance and
/// variances; the normalisation cancels in the ratio.
pub fn pearson(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_r = reference.iter().sum::<f64>() / n;
    let (mut cov, mut var_p, mut var_r) = (0.0, 0.0, 0.0);
    for (p, r) in pred.iter().zip(reference) {
        let dp = p - mean_p;
        let dr = r - mean_r;
        cov += dp * dr;
        var_p += dp * dp;
        var_r += dr * dr;
    }
    if var_p == 0.0 || var_r == 0.0 {
        return Err(Error::ConstantInput);
    }
    let (cov, var_p, var_r) = (cov / n, var_p / n, var_r / n);
    Ok((cov / (var_p.sqrt() * var_r.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn spearman(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    pearson(&average_ranks(pred), &average_ranks(reference))
}

/// Percentage of pairs whose absolute error is at most `tol` (inclusive).
pub fn within_tolerance(pred: &[f64], reference: &[f64], tol: f64) -> Result<f64> {
    check_pair(pred, reference)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let hits = pred
        .iter()
        .zip(reference)
        .filter(|(p, r)| (*p - *r).abs() <= tol)
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Nearest reference level, halves rounding up, clamped to [2.0, 5.5].
pub fn snap_to_level(score: f64) -> f64 {
    let steps = (score / LEVEL_STEP + 0.5).floor();
    (steps * LEVEL_STEP).clamp(MIN_LEVEL, MAX_LEVEL)
}

/// Unweighted mean of per-class F1 over every class seen in the references
/// or the snapped predictions. Classes with no support on either side
/// contribute nothing; a class with TP = 0 contributes 0.
pub fn macro_f1(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference)?;
    // keyed by half-steps so the map key is an integer
    let mut counts: BTreeMap<i64, (usize, usize, usize)> = BTreeMap::new();
    for (&p, &r) in pred.iter().zip(reference) {
        let p = (snap_to_level(p) / LEVEL_STEP).round() as i64;
        let r = (r / LEVEL_STEP).round() as i64;
        if p == r {
            counts.entry(p).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(r).or_default().2 += 1;
        }
    }
    let total: f64 = counts
        .values()
        .map(|&(tp, fp, fn_)| {
            let precision = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let recall = if tp + fn_ == 0 {
                0.0
            } else {
                tp as f64 / (tp + fn_) as f64
            };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok(total / counts.len() as f64)
}

/// All five leaderboard metrics on one pairing.
pub fn full_report(pred: &[f64], reference: &[f64]) -> Result<MetricReport> {
    Ok(MetricReport {
        rmse: rmse(pred, reference)?,
        pcc: pearson(pred, reference)?,
        src: spearman(pred, reference)?,
        within_half: within_tolerance(pred, reference, 0.5)?,
        within_one: within_tolerance(pred, reference, 1.0)?,
        n: pred.len(),
    })
}
