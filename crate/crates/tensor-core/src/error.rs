//! Error taxonomy for the engine.
//!
//! Every fallible engine entry point returns [`EngineError`]. Shape problems
//! name the offending node so a failure deep inside a network is actionable
//! without a debugger.

use thiserror::Error;

/// Errors raised by graph construction, execution, and optimization.
#[derive(Debug, Error)]
pub enum EngineError {
    /// Tensor or activation shapes are inconsistent at a node.
    #[error("shape mismatch at {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    /// An argument violated a precondition (non-positive lr, bad ratio, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A trace was replayed against a network whose parameters have changed
    /// since the forward pass that produced it.
    #[error("stale trace: network is at version {network}, trace was taken at version {trace}")]
    StaleTrace { trace: u64, network: u64 },

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// The node graph itself is malformed (bad wiring, missing loss, ...).
    #[error("graph error: {0}")]
    Graph(String),
}

/// Convenience alias used across the engine.
pub type Result<T> = std::result::Result<T, EngineError>;
