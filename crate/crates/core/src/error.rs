use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An invalid configuration value; `field` names the offending entry.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    /// Training produced a non-finite loss; the last good checkpoint is left in place.
    #[error("training diverged at step {step} ({term} = {value})")]
    Divergence { step: u64, term: String, value: f64 },

    #[error("runs are not comparable: {0}")]
    Comparability(String),

    #[error("segmenter gate not met: per-pixel accuracy {accuracy:.4} < {gate:.2}")]
    SegmenterGate { accuracy: f64, gate: f64 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
