use std::io;

use thiserror::Error;

/// Errors raised across the decoding pipeline.
#[derive(Debug, Error)]
pub enum BciError {
    #[error("invalid vibrator id {0} (expected 1..=4)")]
    InvalidVibrator(u8),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("training data has a single class")]
    SingleClass,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing channel {0}")]
    MissingChannel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("statistic undefined: {0}")]
    Undefined(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl BciError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            BciError::Config(_) | BciError::InvalidParameter(_) | BciError::InvalidVibrator(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = BciError> = std::result::Result<T, E>;
