use thiserror::Error;

/// Errors for cost accounting and budget arithmetic.
#[derive(Debug, Error)]
pub enum CostError {
    /// A budget violates its own invariants (milestone order, positivity, label).
    #[error("invalid budget: {0}")]
    BadBudget(String),

    /// A cost query was given out-of-range or non-sensical arguments.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// The architecture spec itself failed to build.
    #[error(transparent)]
    Zoo(#[from] model_zoo::ZooError),
}

pub type Result<T> = std::result::Result<T, CostError>;
