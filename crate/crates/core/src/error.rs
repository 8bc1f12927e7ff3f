//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants map onto the CLI
//! exit-code scheme: configuration and usage problems are distinguished from
//! runtime/data failures so the binary can report them differently.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or axes that do not line up, named so the caller can see both sides.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A temporal sequence too short for the requested receptive field.
    #[error("sequence too short: need at least {required} steps, got {got}")]
    Length { required: usize, got: usize },

    /// Invalid hyperparameter or configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A required input (file, matrix, flag) was not supplied.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Text ingestion failure; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Training aborted (divergence, non-finite gradients).
    #[error("training failed: {0}")]
    Train(String),

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
