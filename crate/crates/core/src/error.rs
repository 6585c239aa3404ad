use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure cases the public
/// operations are contracted to report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: String,
        detail: String,
    },
    #[error("unbound input '{0}'")]
    UnboundInput(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("unknown buffer '{0}'")]
    UnknownBuffer(String),
    #[error("loss node {0} is not a scalar")]
    NonScalarLoss(usize),
    #[error("gradient check budget exceeded: {actual} parameter scalars > {budget}")]
    BudgetExceeded { actual: usize, budget: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("mask is not binary")]
    NonBinaryMask,
    #[error("mask is empty")]
    EmptyMask,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("comparison graph is disconnected")]
    DisconnectedTally,
    #[error("tally has no judgments")]
    EmptyTally,
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
