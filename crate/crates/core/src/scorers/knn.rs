//! Deep nearest neighbours: negative distance to the k-th closest training
//! feature, all features projected onto the unit sphere.

use super::ScorerConfig;
use crate::error::{OodError, Result};
use crate::numeric::l2_norm;
use crate::pack::FeaturePack;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnState {
    pub k: usize,
    pub dim: usize,
    /// Row-major unit-norm training features.
    pub train: Vec<f64>,
}

pub(crate) fn normalize(h: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(h);
    if n == 0.0 {
        return None;
    }
    Some(h.iter().map(|v| v / n).collect())
}

pub(super) fn fit(config: &ScorerConfig, train: &FeaturePack, warnings: &mut Vec<String>) -> Result<KnnState> {
    let n = train.n_rows();
    let dim = train.dim();
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let unit = normalize(&train.features().row_f64(i)).ok_or_else(|| {
            OodError::Degenerate(format!("zero training feature vector at row {i}"))
        })?;
        data.extend(unit);
    }
    let k = if config.knn_k > n {
        warnings.push(format!("knn_k={} clamped to training size {n}", config.knn_k));
        n
    } else {
        config.knn_k
    };
    Ok(KnnState { k, dim, train: data })
}

impl KnnState {
    pub fn n_train(&self) -> usize {
        self.train.len() / self.dim
    }

    /// `None` when `h` is the zero vector.
    pub(super) fn score(&self, h: &[f64]) -> Option<f64> {
        let q = normalize(h)?;
        let mut dist: Vec<f64> = self
            .train
            .chunks_exact(self.dim)
            .map(|t| {
                t.iter()
                    .zip(&q)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let (_, kth, _) = dist.select_nth_unstable_by(self.k - 1, f64::total_cmp);
        Some(-*kth)
    }
}
