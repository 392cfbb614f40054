//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("convolution geometry: {0}")]
    Geometry(String),

    #[error("label {label} out of range for alphabet size {alphabet}")]
    LabelRange { label: usize, alphabet: usize },

    #[error("target needs {needed} frames but only {got} are available")]
    TargetTooLong { needed: usize, got: usize },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("unsupported character {0:?}")]
    UnsupportedChar(char),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training: {0}")]
    Train(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
