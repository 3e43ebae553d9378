//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("slot index {index} out of range for {num_parts} parts")]
    SlotOutOfRange { index: usize, num_parts: usize },

    #[error("empty candidate pool for anchor {anchor}")]
    EmptyPool { anchor: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 1 for validation problems, 2 for numeric
    /// failures, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Domain(_) | Error::NumericFailure(_) => 2,
            _ => 1,
        }
    }
}
