use thiserror::Error;

/// Errors raised by selection, surgery and mask plumbing.
#[derive(Debug, Error)]
pub enum PruneError {
    /// A ratio, keep set or mask argument is malformed.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A keep set or mask disagrees with the network it is applied to.
    #[error("layer {layer}: {detail}")]
    Inconsistent { layer: usize, detail: String },

    /// Spec construction failed while deriving the pruned architecture.
    #[error(transparent)]
    Zoo(#[from] model_zoo::ZooError),

    /// The engine rejected an operation on the underlying network.
    #[error(transparent)]
    Engine(#[from] tensor_core::EngineError),
}

pub type Result<T> = std::result::Result<T, PruneError>;
