//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SedaError {
    /// A caller violated a documented precondition (bad shape, bad range,
    /// inconsistent configuration).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced a non-finite value. `step` identifies the
    /// reverse-chain step or the training step where it was detected.
    #[error("numeric failure at step {step}: {message}")]
    NumericFailure { step: usize, message: String },

    /// A byte stream does not parse as the advertised container format.
    #[error("format error: {0}")]
    Format(String),

    /// The bytes parse but the payload breaks an invariant. `record` is the
    /// zero-based index of the offending record.
    #[error("validation error at record {record}: {message}")]
    Validation { record: usize, message: String },

    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SedaError>;

impl SedaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SedaError::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        SedaError::Format(msg.into())
    }
}
