use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("cache does not match the parameters or gradient it is used with: {0}")]
    StaleCache(String),

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error("training diverged: non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("graph contains a directed cycle")]
    CyclicGraph,

    #[error("graph has no nonzero off-diagonal entry")]
    AllZeroGraph,

    #[error("strong-edge floor {strong} must exceed weak-edge ceiling {weak}")]
    MarginViolated { weak: f64, strong: f64 },

    #[error("labels must contain both classes ({positives} positives of {total})")]
    DegenerateLabels { positives: usize, total: usize },

    #[error("lasso did not converge within {0} sweeps")]
    MaxIterExceeded(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
