use thiserror::Error;

/// Errors raised by the inference engines and their supporting kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite activation at layer {layer}, position {position}")]
    NumericFailure { layer: usize, position: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn require_pow2(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(invalid(format!("{what} must be a power of two, got {n}")));
    }
    Ok(())
}
