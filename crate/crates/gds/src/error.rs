use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A batch contained no distances for one of the pair populations.
    #[error("no pairs in batch")]
    EmptyBatch,

    /// A batch cannot support the requested loss (e.g. no positive pairs).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Tensor or label shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A precondition on the inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Every target sample was filtered out after clustering.
    #[error("no usable clusters")]
    NoUsableClusters,

    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
