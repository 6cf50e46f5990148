//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape violations (non-scalar loss, width mismatches, rank bounds).
    #[error("shape error: {0}")]
    Shape(String),

    /// Operating on a tensor the tape did not produce.
    #[error("tensor {0} was not produced by this tape")]
    NotOnTape(usize),

    /// Graph construction or lookup problems.
    #[error("graph error: {0}")]
    Graph(String),

    /// Not enough edges of the task type for the requested split.
    #[error("split needs {needed} edges of type {task_type}, graph has {available}")]
    InsufficientEdges {
        task_type: String,
        needed: usize,
        available: usize,
    },

    /// Negative sampling exhausted its retry budget.
    #[error("no valid negative for node {node} after {attempts} attempts")]
    NegativeSampling { node: usize, attempts: usize },

    /// A loss with no unmasked target positions.
    #[error("loss has no target positions")]
    EmptyLoss,

    /// Sequence does not fit the model capacity.
    #[error("sequence needs {needed} positions, capacity is {capacity}")]
    Capacity { needed: usize, capacity: usize },

    /// Cosine distance is undefined on a zero-norm embedding.
    #[error("zero-norm embedding for node {0}")]
    ZeroNorm(usize),

    /// Configuration value missing or malformed.
    #[error("config error: {0}")]
    Config(String),

    /// File format violations when reading graphs, splits, or checkpoints.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
