use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the factorization library.
///
/// Mode and tensor indices in messages are 1-based.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mode {mode} for a tensor of order {order} (modes are 1..={order})")]
    InvalidMode { mode: usize, order: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("column count mismatch: left has {left}, right has {right}")]
    ColumnMismatch { left: usize, right: usize },

    #[error("reference has zero norm on the evaluated subset")]
    ZeroNorm,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "singular normal equations while updating {block} at sigma = 0; \
         use a positive penalty or enable the pseudo-inverse fallback"
    )]
    SingularSystem { block: String },

    #[error("shared dimension mismatch: tensor {tensor} has first mode {found} but tensor 1 has {expected}")]
    SharedDimMismatch {
        tensor: usize,
        expected: usize,
        found: usize,
    },

    #[error("tensor {tensor} has no observed entries")]
    NoObservedData { tensor: usize },

    #[error("infeasible holdout: {0}")]
    InfeasibleHoldout(String),

    #[error("invalid penalty grid: {0}")]
    InvalidGrid(String),

    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),

    #[error("invalid tensor index {index} (have {count} tensors)")]
    InvalidTensorIndex { index: usize, count: usize },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
