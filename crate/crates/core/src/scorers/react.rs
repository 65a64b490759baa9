//! ReAct: clip penultimate activations at a high percentile of their
//! in-distribution values, then take the energy of the recomputed logits.

use super::{energy, ScorerConfig};
use crate::error::Result;
use crate::numeric::percentile;
use crate::pack::{ClassifierHead, FeaturePack};

#[derive(Debug, Clone, PartialEq)]
pub struct ReactState {
    /// One threshold for every dimension, or one per dimension.
    pub clip: Vec<f64>,
}

pub(super) fn fit(config: &ScorerConfig, train: &FeaturePack) -> Result<ReactState> {
    let features = train.features();
    let clip = if config.react_per_dimension {
        (0..features.cols())
            .map(|j| {
                let mut col: Vec<f64> = features.row_iter().map(|r| f64::from(r[j])).collect();
                percentile(&mut col, config.react_percentile)
            })
            .collect()
    } else {
        let mut pool: Vec<f64> = features.data().iter().map(|&v| f64::from(v)).collect();
        vec![percentile(&mut pool, config.react_percentile)]
    };
    Ok(ReactState { clip })
}

impl ReactState {
    pub fn threshold(&self, j: usize) -> f64 {
        if self.clip.len() == 1 {
            self.clip[0]
        } else {
            self.clip[j]
        }
    }

    pub(super) fn score(&self, h: &[f64], head: &ClassifierHead, temperature: f64) -> f64 {
        let clipped: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(j, &v)| v.min(self.threshold(j)))
            .collect();
        energy(&head.logits_f64(&clipped), temperature)
    }
}
