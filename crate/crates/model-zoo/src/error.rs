//! Zoo error type; engine errors pass through transparently.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZooError {
    /// The description cannot be realized as a network.
    #[error("invalid architecture: {0}")]
    BadSpec(String),

    #[error(transparent)]
    Engine(#[from] tensor_core::EngineError),
}

pub type Result<T> = std::result::Result<T, ZooError>;
