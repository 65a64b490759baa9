use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OodError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OodError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest missing in {0}")]
    ManifestMissing(PathBuf),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checksum mismatch in {path}: expected {expected:016x}, computed {actual:016x}")]
    Checksum {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("header/manifest mismatch in {path}: {reason}")]
    HeaderMismatch { path: PathBuf, reason: String },
    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl OodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OodError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        OodError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
