//! Sweep and calibration harness behind the `flash-bench` binary.

pub mod config;
pub mod sweep;

pub use config::{ImplChoice, Mode, SweepSpec};
pub use sweep::{run_calibration, run_sweep, Check, SummaryRow, SweepReport};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("oracle mismatch:\n{0}")]
    OracleMismatch(String),

    #[error("audit failed:\n{0}")]
    AuditFailed(String),

    #[error(transparent)]
    Core(#[from] flash_lcsm::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
