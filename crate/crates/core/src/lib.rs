//! Exact autoregressive inference for long-convolution sequence models in
//! `O(L log² L)` total mixer work, using relaxed polynomial interpolation.

pub mod data_dependent;
pub mod engine;
pub mod error;
pub mod fft;
pub mod filters;
pub mod framework;
pub mod instrumentation;
pub mod relaxed;
mod rng;
pub mod tau;

pub use engine::{
    relative_error, ActivationStore, Baseline, BlockKind, BlockStack, ExecMode, Generation, Model,
    ModelConfig, RunOptions, Sampler, SamplerSpec,
};
pub use error::{Error, Result};
pub use fft::{KernelDftCache, Spectrum};
pub use filters::FilterBank;
pub use instrumentation::{AuditMode, AuditReport, BenchRecord, Ledger, RecordFormat, RunShape};
pub use tau::{DispatchTable, TauImplKind, TileTask};
