use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "matrix is not positive definite after ridge regularization (pivot {pivot} at row {row})"
    )]
    SingularMatrix { row: usize, pivot: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("item index {index} out of range for {num_items} items")]
    ItemOutOfRange { index: usize, num_items: usize },

    #[error("round {round} out of range for horizon {horizon}")]
    RoundOutOfRange { round: usize, horizon: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("all feature vectors are zero; no design exists")]
    DegenerateFeatures,

    #[error("no pair has any recorded comparison")]
    EmptyCounts,

    #[error("MLE did not converge after {iterations} iterations (score residual {residual:.3e})")]
    NonConvergence {
        theta: Vec<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
