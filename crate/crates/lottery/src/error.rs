use thiserror::Error;

/// Errors for ticket snapshots and iterative pruning.
#[derive(Debug, Error)]
pub enum LotteryError {
    /// The snapshot guard: an initialization can only be captured before any
    /// optimizer step has touched the network.
    #[error("network has already taken {0} training steps; snapshot refused")]
    NotFresh(u64),

    /// A snapshot or mask does not line up with the network it is applied to.
    #[error("node {node}: {detail}")]
    Mismatch { node: usize, detail: String },

    /// A malformed plan or argument.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Mask plumbing failed underneath.
    #[error(transparent)]
    Prune(#[from] pruning::PruneError),

    /// The engine rejected an operation.
    #[error(transparent)]
    Engine(#[from] tensor_core::EngineError),
}

pub type Result<T> = std::result::Result<T, LotteryError>;
