use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid resolution {resolution}: {reason}")]
    InvalidResolution { resolution: usize, reason: String },

    #[error("patch out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid patch size {size} for resolution {resolution}")]
    InvalidPatchSize { size: usize, resolution: usize },

    #[error("invalid configuration: `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("numerical error in `{path}`: {reason}")]
    Numerical { path: String, reason: String },

    #[error("invalid label {label} (num_classes = {num_classes})")]
    Label { label: usize, num_classes: usize },

    #[error("identifiability error: indices {uncovered:?} are never observed")]
    Identifiability { uncovered: Vec<usize> },

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}
