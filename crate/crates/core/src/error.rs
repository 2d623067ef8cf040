//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by adapter algebra, aggregation, training, and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid rank {rank}: {reason}")]
    InvalidRank { rank: usize, reason: &'static str },

    #[error("cannot pad to smaller rank (rank {rank}, target {target})")]
    PadToSmallerRank { rank: usize, target: usize },

    #[error("cannot truncate rank {rank} to {target}")]
    BadTruncation { rank: usize, target: usize },

    #[error("undefined similarity for zero matrix")]
    ZeroMatrix,

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("no clients sampled")]
    NoClients,

    #[error("layer index {index} out of range (stack has {len} layers)")]
    LayerOutOfRange { index: usize, len: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("metrics parse error: {0}")]
    MetricsParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
