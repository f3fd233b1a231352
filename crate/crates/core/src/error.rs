use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: row {row}: {message}")]
    Parse { path: PathBuf, row: usize, message: String },

    #[error("{path}: row {row} has {found} columns, expected {expected} (ragged rows)")]
    Ragged { path: PathBuf, row: usize, expected: usize, found: usize },

    #[error("set {id:?} has {n} samples: n ≥ 2 violated")]
    TooFewSamples { id: String, n: usize },

    #[error("dimension mismatch: set {first:?} has D={first_dim} but set {other:?} has D={other_dim}")]
    DimensionMismatch { first: String, first_dim: usize, other: String, other_dim: usize },

    #[error("non-finite value in set {id:?} at row {row}, column {col}")]
    NonFinite { id: String, row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {label} has {size} sets but {requested} gallery sets per class were requested")]
    ClassTooSmall { label: usize, size: usize, requested: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("retraction failed: W + tH is rank deficient")]
    RankDeficient,

    #[error("generalized eigenproblem failed; try a larger regularization than λ = {lambda:e}")]
    EigenFailure { lambda: f64 },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    /// True when the failure originated in the file system rather than in the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
