use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("frame dimension {got} does not match feature_dim {expected}")]
    FrameDim { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("k = {k} exceeds the {available} entries available")]
    TooFewEntries { k: usize, available: usize },

    #[error("interpolation coefficient {0} outside [0, 1]")]
    Lambda(f64),

    #[error("probability vector sums to {0}, expected 1")]
    NotNormalized(f64),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
