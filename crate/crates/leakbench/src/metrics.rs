//! ROC AUC and multi-seed aggregation statistics.

use crate::error::{Error, Result};

/// Rank-based ROC AUC with midrank tie correction.
///
/// Equals the probability that a random positive outranks a random negative,
/// with ties counting one half. O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite { context: "AUC scores".into() });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUC undefined for single-class labels".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-seed values with their mean, sample standard deviation, and
/// coefficient of variation.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedStats {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator).
    pub std: f64,
    /// `std / mean`; absent when the mean is exactly zero.
    pub cv: Option<f64>,
}

impl SeedStats {
    /// `"mean ± std"` with four decimals, matching the report tables.
    pub fn formatted(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Aggregate per-seed values; needs at least two.
pub fn aggregate_seeds(values: &[f64]) -> Result<SeedStats> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "seed aggregation needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "seed values".into() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let cv = if mean != 0.0 { Some(std / mean) } else { None };
    Ok(SeedStats { values: values.to_vec(), mean, std, cv })
}
