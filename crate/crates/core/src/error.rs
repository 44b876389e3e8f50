//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("cannot split {len} tokens into {parts} segments")]
    Split { len: usize, parts: usize },

    #[error("cannot pool an empty list of states")]
    EmptyPool,

    #[error("states come from different models (fingerprint mismatch)")]
    IncompatibleStates,

    #[error("state layer {layer} has zero norm; refusing to normalize")]
    DegenerateState { layer: usize },

    #[error("stale state: fingerprint does not match the serving model")]
    StaleState,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch: file is corrupt")]
    Corrupt,

    #[error("cache miss for ids: {}", .0.join(", "))]
    CacheMiss(Vec<String>),

    #[error("training pipeline error: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
