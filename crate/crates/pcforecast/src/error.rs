//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file or record.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor or image dimensions do not match the operation contract.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Invalid configuration value; names the violated constraint.
    #[error("invalid config: {0}")]
    Config(String),

    /// Missing input required by the operation (e.g. poses for a baseline).
    #[error("missing input: {0}")]
    MissingInput(String),

    /// Training produced a non-finite loss; carries the offending sample id.
    #[error("non-finite loss at sample {sample}: {detail}")]
    NonFiniteLoss { sample: usize, detail: String },

    /// Checkpoint does not match the requested architecture.
    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
