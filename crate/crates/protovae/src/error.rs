//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. `dim` names the
    /// offending dimension of the reported operand.
    #[error("{op}: dimension {dim} mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: usize,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    /// Value outside the mathematical domain of an operation (e.g. log of a
    /// non-positive number).
    #[error("{op}: domain error: {message}")]
    Domain { op: &'static str, message: String },

    #[error("backward target must be a scalar, got {numel} elements")]
    NonScalarBackward { numel: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// Malformed IDX container. `offset` is the byte offset at which the
    /// problem was detected.
    #[error("{path}: invalid IDX data at byte {offset}: {message}")]
    IdxFormat {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("label {label} at record {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        num_classes: usize,
    },

    #[error("checkpoint: {message}")]
    Checkpoint { message: String },

    /// Non-finite value observed where a finite one is required.
    #[error("numerical failure in {context}{}", batch_index.map(|i| format!(" (batch {i})")).unwrap_or_default())]
    NumericalFailure {
        context: &'static str,
        batch_index: Option<usize>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
