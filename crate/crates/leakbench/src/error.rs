//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes for a primitive.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value (NaN/Inf) was produced where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Configuration file or value problem.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data; carries one diagnostic per offending row/file.
    #[error("data format error:\n{}", .diagnostics.join("\n"))]
    DataFormat { diagnostics: Vec<String> },

    /// Checkpoint container problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Metric undefined for the given inputs (e.g. single-class AUC).
    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
