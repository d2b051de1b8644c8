//! Harness error type.
//!
//! One enum covers the whole orchestration surface: dataset format problems,
//! configuration validation, checkpoint container faults (each corruption
//! class is its own variant so tests can assert the *kind*, not a message),
//! and pass-through wrappers for every sibling crate.

use thiserror::Error;

/// Errors produced by dataset IO, training orchestration, checkpoints, and
/// report emission.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Dataset bytes do not fit the expected record layout.
    #[error("dataset format error: {0}")]
    Format(String),
    /// Experiment configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),
    /// Analysis precondition violated (stage mismatch, empty inputs, …).
    #[error("analysis error: {0}")]
    Analysis(String),
    /// Checkpoint file does not start with the container magic.
    #[error("checkpoint magic mismatch (not a checkpoint file)")]
    BadMagic,
    /// Checkpoint container version this build does not understand.
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    /// Checkpoint file ends before the advertised payload does.
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    /// Checkpoint decoded but its contents are internally inconsistent.
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("metadata encoding error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Engine(#[from] tensor_core::EngineError),
    #[error(transparent)]
    Zoo(#[from] model_zoo::ZooError),
    #[error(transparent)]
    Cost(#[from] cost_model::CostError),
    #[error(transparent)]
    Prune(#[from] pruning::PruneError),
    #[error(transparent)]
    Lottery(#[from] lottery::LotteryError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
