//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or configuration value.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Tensor or matrix shapes are incompatible for an operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A numerical operation failed (singular matrix, non-finite value).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A cross-validation paradigm's constraints cannot be satisfied.
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    /// A dataset file or manifest is malformed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Backward was requested before any forward pass recorded a graph.
    #[error("backward called before forward")]
    BackwardBeforeForward,

    /// Evaluation input is unusable (empty split, missing class, ...).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
