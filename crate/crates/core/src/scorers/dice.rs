//! DICE: sparsify the head by keeping only the weights with the largest
//! expected contribution `w_ij * mean(h_j)`, then score with energy.

use super::{energy, ScorerConfig};
use crate::error::Result;
use crate::pack::{ClassifierHead, FeaturePack};

#[derive(Debug, Clone, PartialEq)]
pub struct DiceState {
    /// Row-major C x D keep-mask over the head weights.
    pub mask: Vec<bool>,
}

/// Number of entries kept out of `total` for sparsity `p`.
pub(crate) fn kept_count(total: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * total as f64).round() as usize).min(total)
}

pub(super) fn fit(config: &ScorerConfig, train: &FeaturePack, head: &ClassifierHead) -> Result<DiceState> {
    let d = head.dim();
    let n = train.n_rows() as f64;
    let mut mean = vec![0.0f64; d];
    for row in train.features().row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += f64::from(v));
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let contrib: Vec<f64> = head
        .weight()
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &w)| f64::from(w) * mean[idx % d])
        .collect();
    let keep = kept_count(contrib.len(), config.dice_sparsity);
    let mut order: Vec<usize> = (0..contrib.len()).collect();
    // descending contribution, lower flat index first on ties
    order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
    let mut mask = vec![false; contrib.len()];
    for &idx in &order[..keep] {
        mask[idx] = true;
    }
    Ok(DiceState { mask })
}

impl DiceState {
    pub fn density(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub(super) fn score(&self, h: &[f64], head: &ClassifierHead, temperature: f64) -> f64 {
        let d = head.dim();
        let z: Vec<f64> = head
            .weight()
            .row_iter()
            .zip(head.bias())
            .enumerate()
            .map(|(k, (w, &b))| {
                let mask = &self.mask[k * d..(k + 1) * d];
                w.iter()
                    .zip(h)
                    .zip(mask)
                    .filter(|(_, &keep)| keep)
                    .map(|((&wj, &hj), _)| f64::from(wj) * hj)
                    .sum::<f64>()
                    + f64::from(b)
            })
            .collect();
        energy(&z, temperature)
    }
}
