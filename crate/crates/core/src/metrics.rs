//! Detection metrics. In-distribution samples are the positive class and a
//! sample is predicted ID when its score is `>=` the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{OodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub auroc: f64,
    pub aupr_in: f64,
    pub fpr_at_95: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(OodError::Empty(format!(
            "need ID and OOD scores (got {} and {})",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(OodError::Invalid("scores must be finite".into()));
    }
    Ok(())
}

/// (score, is_id) sorted by descending score.
fn ranked(id: &[f64], ood: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

/// Cumulative (tp, fp) after each block of tied scores, highest first.
fn threshold_sweep(id: &[f64], ood: &[f64]) -> Vec<(usize, usize)> {
    let all = ranked(id, ood);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Mann-Whitney form: `P(id > ood) + 0.5 P(id = ood)`.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut all = ranked(id, ood);
    all.reverse();
    // mid-ranks (1-based) over ascending scores
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum_id += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n1, n0) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum_id - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Average precision with ID as positives: `sum (R_t - R_{t-1}) P_t` over
/// descending unique thresholds.
pub fn aupr_in(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let n_id = id.len() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in threshold_sweep(id, ood) {
        let recall = tp as f64 / n_id;
        if tp > 0 {
            ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        }
        prev_recall = recall;
    }
    Ok(ap)
}

/// FPR at the highest threshold whose TPR reaches `tpr_target`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check(id, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(OodError::Config(format!(
            "TPR target must be in (0, 1], got {tpr_target}"
        )));
    }
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    for (tp, fp) in threshold_sweep(id, ood) {
        if tp as f64 / n_id >= tpr_target {
            return Ok(fp as f64 / n_ood);
        }
    }
    unreachable!("the lowest threshold accepts every sample")
}

pub fn evaluate(id: &[f64], ood: &[f64]) -> Result<DetectionOutcome> {
    Ok(DetectionOutcome {
        auroc: auroc(id, ood)?,
        aupr_in: aupr_in(id, ood)?,
        fpr_at_95: fpr_at_tpr(id, ood, 0.95)?,
        n_id: id.len(),
        n_ood: ood.len(),
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

impl AggregateCell {
    /// Percent-scaled, one decimal: `74.2±0.3`.
    pub fn percent_cell(&self) -> String {
        format!("{:.1}±{:.1}", self.mean * 100.0, self.std * 100.0)
    }
}

/// Mean and `n - 1` standard deviation (0 for a single value).
pub fn aggregate(values: &[f64]) -> Result<AggregateCell> {
    if values.is_empty() {
        return Err(OodError::Empty("nothing to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(AggregateCell {
        mean,
        std,
        n_seeds: values.len(),
    })
}
