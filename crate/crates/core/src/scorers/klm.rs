//! KL matching against per-class mean softmax templates.

use super::{row_logits, ScorerConfig};
use crate::error::{OodError, Result};
use crate::numeric::{argmax, softmax_t};
use crate::pack::{ClassifierHead, FeaturePack};

const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KlmState {
    /// Predicted-class index of each template.
    pub classes: Vec<usize>,
    /// Mean softmax vector of the samples predicted as that class.
    pub templates: Vec<Vec<f64>>,
}

pub(super) fn fit(
    config: &ScorerConfig,
    calib: &FeaturePack,
    head: &ClassifierHead,
    warnings: &mut Vec<String>,
) -> Result<KlmState> {
    let c = head.n_classes();
    let mut sums = vec![vec![0.0f64; c]; c];
    let mut counts = vec![0usize; c];
    for i in 0..calib.n_rows() {
        let h = calib.features().row_f64(i);
        let p = softmax_t(&row_logits(calib, head, i, &h), config.temperature);
        let k = argmax(&p);
        counts[k] += 1;
        sums[k].iter_mut().zip(&p).for_each(|(s, v)| *s += v);
    }
    let mut classes = Vec::new();
    let mut templates = Vec::new();
    for (k, (sum, n)) in sums.into_iter().zip(counts).enumerate() {
        if n == 0 {
            warnings.push(format!(
                "degenerate class {k}: no calibration sample predicted as it; template dropped"
            ));
            continue;
        }
        classes.push(k);
        templates.push(sum.into_iter().map(|s| s / n as f64).collect());
    }
    if templates.is_empty() {
        return Err(OodError::Degenerate("no KLM templates could be formed".into()));
    }
    Ok(KlmState { classes, templates })
}

/// `sum_j p_j ln(p_j / d_j)` with both sides floored at 1e-12.
pub(crate) fn kl_divergence(p: &[f64], d: &[f64]) -> f64 {
    p.iter()
        .zip(d)
        .map(|(&pj, &dj)| {
            let pj = pj.max(FLOOR);
            pj * (pj / dj.max(FLOOR)).ln()
        })
        .sum()
}

impl KlmState {
    pub(super) fn score(&self, z: &[f64], temperature: f64) -> f64 {
        let p = softmax_t(z, temperature);
        let best = self
            .templates
            .iter()
            .map(|d| kl_divergence(&p, d))
            .fold(f64::INFINITY, f64::min);
        -best.max(0.0)
    }
}
