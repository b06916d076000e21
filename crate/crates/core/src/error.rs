use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: domain violation ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index { op: &'static str, index: usize, extent: usize },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("latent index {index} out of range for vocabulary {vocab} at position {position}")]
    LatentIndex { index: usize, vocab: usize, position: usize },
    #[error("latent code has length {got}, expected {expected}")]
    LatentLength { got: usize, expected: usize },
    #[error("enumeration of {count} codes exceeds cap {cap}")]
    EnumerationCap { count: f64, cap: usize },
    #[error("support violation: {0}")]
    Support(String),
    #[error("target ESS ratio {target} outside achievable interval ({low}, {high})")]
    TargetUnreachable { target: f64, low: f64, high: f64 },
    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite { what: String, step: u64, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
