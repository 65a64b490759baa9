//! Post-hoc OOD confidence scorers.
//!
//! Every method follows the same two-step protocol: [`fit`] estimates whatever
//! statistics the method needs from in-distribution data, then [`score`]
//! assigns one real value per sample. Higher scores always mean "more
//! in-distribution".
//!
//! Notation used below: `h` is the penultimate feature, `z = W h + b` the
//! logits and `p = softmax(z / T)`.

mod dice;
mod klm;
mod knn;
pub mod persist;
mod react;
mod vim;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OodError, Result};
use crate::numeric::{l1_norm, logsumexp, max, softmax_t};
use crate::pack::{ClassifierHead, FeaturePack};

pub use persist::{load_detector, save_detector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MSP")]
    Msp,
    #[serde(rename = "Energy")]
    Energy,
    #[serde(rename = "GradNorm")]
    GradNorm,
    #[serde(rename = "KLM")]
    Klm,
    #[serde(rename = "ReAct")]
    React,
    #[serde(rename = "DICE")]
    Dice,
    #[serde(rename = "KNN")]
    Knn,
    #[serde(rename = "ViM")]
    Vim,
}

impl Method {
    /// All methods in report-row order.
    pub const ALL: [Method; 8] = [
        Method::Msp,
        Method::Energy,
        Method::GradNorm,
        Method::Klm,
        Method::React,
        Method::Dice,
        Method::Knn,
        Method::Vim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "MSP",
            Method::Energy => "Energy",
            Method::GradNorm => "GradNorm",
            Method::Klm => "KLM",
            Method::React => "ReAct",
            Method::Dice => "DICE",
            Method::Knn => "KNN",
            Method::Vim => "ViM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .ok_or_else(|| OodError::Config(format!("unknown method `{s}`")))
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>>>()?;
    if methods.is_empty() {
        return Err(OodError::Config("method list is empty".into()));
    }
    Ok(methods)
}

/// Method hyperparameters. Unset fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub method: Method,
    pub temperature: f64,
    /// ReAct clip percentile, in (0, 100].
    pub react_percentile: f64,
    /// Clip each feature dimension at its own percentile instead of one
    /// threshold pooled over all activations.
    pub react_per_dimension: bool,
    /// Fraction of head weights DICE removes, in [0, 1].
    pub dice_sparsity: f64,
    pub knn_k: usize,
    /// ViM principal subspace dimension; `None` means `D / 2`.
    pub vim_dim: Option<usize>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            method: Method::Msp,
            temperature: 1.0,
            react_percentile: 90.0,
            react_per_dimension: false,
            dice_sparsity: 0.7,
            knn_k: 50,
            vim_dim: None,
        }
    }
}

impl ScorerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(OodError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.react_percentile > 0.0 && self.react_percentile <= 100.0) {
            return Err(OodError::Config(format!(
                "react_percentile must be in (0, 100], got {}",
                self.react_percentile
            )));
        }
        if !(0.0..=1.0).contains(&self.dice_sparsity) {
            return Err(OodError::Config(format!(
                "dice_sparsity must be in [0, 1], got {}",
                self.dice_sparsity
            )));
        }
        if self.knn_k == 0 {
            return Err(OodError::Config("knn_k must be positive".into()));
        }
        if self.vim_dim == Some(0) {
            return Err(OodError::Config("vim_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Method-specific state estimated during [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorState {
    Msp,
    Energy,
    GradNorm,
    React(react::ReactState),
    Klm(klm::KlmState),
    Dice(dice::DiceState),
    Vim(vim::VimState),
    Knn(knn::KnnState),
}

pub use dice::DiceState;
pub use klm::KlmState;
pub use knn::KnnState;
pub use react::ReactState;
pub use vim::VimState;

#[derive(Debug, Clone, PartialEq)]
pub struct FittedDetector {
    pub config: ScorerConfig,
    pub dim: usize,
    pub n_classes: usize,
    pub state: DetectorState,
    /// Non-fatal conditions met while fitting.
    pub warnings: Vec<String>,
}

impl FittedDetector {
    pub fn method(&self) -> Method {
        self.config.method
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub method: Method,
    pub split_name: String,
    pub scores: Vec<f64>,
}

/// Logits of row `i`: stored logits when the pack has them, else `W h + b`.
pub(crate) fn row_logits(pack: &FeaturePack, head: &ClassifierHead, i: usize, h: &[f64]) -> Vec<f64> {
    match pack.logits() {
        Some(l) => l.row(i).iter().map(|&v| f64::from(v)).collect(),
        None => head.logits_f64(h),
    }
}

/// `T * logsumexp(z / T)`.
pub(crate) fn energy(z: &[f64], temperature: f64) -> f64 {
    if temperature == 1.0 {
        return logsumexp(z);
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    temperature * logsumexp(&scaled)
}

fn msp(z: &[f64], temperature: f64) -> f64 {
    max(&softmax_t(z, temperature))
}

/// `||softmax(z) - u||_1 * ||h||_1`, the L1 norm of the head gradient of
/// the cross-entropy against the uniform target. The gradient is the outer
/// product `(p - u) h^T`, whose entrywise L1 norm factorizes. Always uses
/// T = 1 so the factorization is exact.
fn gradnorm(z: &[f64], h: &[f64]) -> f64 {
    let p = softmax_t(z, 1.0);
    let u = 1.0 / z.len() as f64;
    let dev: f64 = p.iter().map(|&pi| (pi - u).abs()).sum();
    dev * l1_norm(h)
}

/// Estimates the detector state from in-distribution data.
///
/// `calib` is only used by KLM; it falls back to `train` when absent.
pub fn fit(
    config: &ScorerConfig,
    train: &FeaturePack,
    head: &ClassifierHead,
    calib: Option<&FeaturePack>,
) -> Result<FittedDetector> {
    config.validate()?;
    head.check_pack(train)?;
    if let Some(c) = calib {
        head.check_pack(c)?;
    }
    if train.n_rows() == 0 {
        return Err(OodError::Empty("training pack has no rows".into()));
    }
    let mut warnings = Vec::new();
    let state = match config.method {
        Method::Msp => DetectorState::Msp,
        Method::Energy => DetectorState::Energy,
        Method::GradNorm => DetectorState::GradNorm,
        Method::React => DetectorState::React(react::fit(config, train)?),
        Method::Klm => DetectorState::Klm(klm::fit(
            config,
            calib.unwrap_or(train),
            head,
            &mut warnings,
        )?),
        Method::Dice => DetectorState::Dice(dice::fit(config, train, head)?),
        Method::Vim => DetectorState::Vim(vim::fit(config, train, head)?),
        Method::Knn => DetectorState::Knn(knn::fit(config, train, &mut warnings)?),
    };
    for w in &warnings {
        log::warn!("{}: {w}", config.method);
    }
    Ok(FittedDetector {
        config: config.clone(),
        dim: head.dim(),
        n_classes: head.n_classes(),
        state,
        warnings,
    })
}

fn score_row(det: &FittedDetector, pack: &FeaturePack, head: &ClassifierHead, i: usize) -> Result<f64> {
    let h = pack.features().row_f64(i);
    let t = det.config.temperature;
    let s = match &det.state {
        DetectorState::Msp => msp(&row_logits(pack, head, i, &h), t),
        DetectorState::Energy => energy(&row_logits(pack, head, i, &h), t),
        DetectorState::GradNorm => gradnorm(&row_logits(pack, head, i, &h), &h),
        DetectorState::React(st) => st.score(&h, head, t),
        DetectorState::Klm(st) => st.score(&row_logits(pack, head, i, &h), t),
        DetectorState::Dice(st) => st.score(&h, head, t),
        DetectorState::Vim(st) => st.score(&h, &row_logits(pack, head, i, &h)),
        DetectorState::Knn(st) => st
            .score(&h)
            .ok_or_else(|| OodError::Degenerate(format!("zero feature vector at row {i}")))?,
    };
    if !s.is_finite() {
        return Err(OodError::NonFinite {
            what: format!("{} score", det.method()),
            index: i,
        });
    }
    Ok(s)
}

/// Scores every row of `pack`. Rows are processed in parallel; the output
/// order always matches the pack.
pub fn score(det: &FittedDetector, pack: &FeaturePack, head: &ClassifierHead) -> Result<ScoreVector> {
    if pack.n_rows() == 0 {
        return Err(OodError::Empty("pack has no rows".into()));
    }
    head.check_pack(pack)?;
    if head.dim() != det.dim || head.n_classes() != det.n_classes {
        return Err(OodError::Dimension(format!(
            "detector fitted for D={},C={}, head is D={},C={}",
            det.dim,
            det.n_classes,
            head.dim(),
            head.n_classes()
        )));
    }
    let scores = (0..pack.n_rows())
        .into_par_iter()
        .map(|i| score_row(det, pack, head, i))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreVector {
        method: det.method(),
        split_name: pack.split_name().to_string(),
        scores,
    })
}
