use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate batch in {op}: need at least 2 rows, got {rows}")]
    DegenerateBatch { op: &'static str, rows: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("ppm parse error at byte {offset}: {msg}")]
    Ppm { offset: usize, msg: String },

    #[error("checkpoint error in {field}: {msg}")]
    Checkpoint { field: String, msg: String },

    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    CheckpointTruncated { expected: usize, actual: usize },

    #[error("manifest validation failed at {field}{}: {msg}", sample.as_ref().map(|s| format!(" (sample {s})")).unwrap_or_default())]
    Manifest {
        field: String,
        sample: Option<String>,
        msg: String,
    },

    #[error("missing image file {}", path.display())]
    MissingImage { path: PathBuf },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("divergence: non-finite loss at batch {batch}")]
    Divergence { batch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn checkpoint(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
