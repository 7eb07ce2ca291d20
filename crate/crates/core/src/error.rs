//! Crate-wide error type. Variants map 1:1 onto CLI exit codes (see the cli crate).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data format: {0}")]
    Format(String),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("training failed at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },

    #[error("sampling failed at step {step}: {reason}")]
    SamplingFailure { step: usize, reason: String },

    #[error("model state: {0}")]
    State(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
