//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("precision mismatch in {op}: all inputs must share one precision mode")]
    PrecisionMismatch { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("graph already consumed by backward; re-record before calling again")]
    GraphConsumed,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{name}` registered twice with different tensors")]
    ParamConflict { name: String },

    #[error("non-deterministic graph builder: two evaluations of the same loss differ")]
    NonDeterministicBuilder,

    #[error("empty set passed to {0}")]
    EmptySet(&'static str),

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("corrupt {format} file: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("hash mismatch for `{path}`: manifest says {expected}, file is {actual}")]
    HashMismatch { path: String, expected: String, actual: String },

    #[error("missing artifact `{path}`; produce it with `{producer}` first")]
    MissingArtifact { path: String, producer: String },

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("output directory `{0}` is not empty; pass --force to overwrite")]
    OutputNotEmpty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
