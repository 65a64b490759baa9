//! Post-hoc out-of-distribution detection for text classifiers.
//!
//! The crate is organised around the feature [`pack`] format: any classifier
//! that can dump penultimate features, logits and its final linear layer can
//! be evaluated with the [`scorers`] and [`metrics`] here. [`deskmodel`]
//! provides a small built-in classifier, [`scenarios`] builds ID/OOD splits
//! from labelled corpora and [`bench`] runs the whole grid.

pub mod bench;
pub mod corpus;
pub mod deskmodel;
pub mod error;
pub mod hash;
pub mod matrix;
pub mod metrics;
pub mod numeric;
pub mod pack;
pub mod scenarios;
pub mod scorers;

pub use corpus::{LabeledCorpus, Record, Split};
pub use error::{OodError, Result};
pub use matrix::Matrix;
pub use pack::{read_pack, write_pack, ClassifierHead, FeaturePack, PackManifest, PackSet};
pub use scorers::{fit, score, FittedDetector, Method, ScoreVector, ScorerConfig};
