//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("layer '{layer}' is degenerate: {reason}")]
    DegenerateLayer { layer: String, reason: String },

    #[error("non-finite value in layer '{layer}': {reason}")]
    NonFinite { layer: String, reason: String },

    #[error("missing layer '{layer}' in {what}")]
    MissingLayer { layer: String, what: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("estimator needs at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("oracle size cap exceeded: N*K = {nk} > {cap}")]
    OracleCap { nk: usize, cap: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
