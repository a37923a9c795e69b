use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },

    #[error("singular interaction between particles {i} and {j} (coincident positions, zero softening)")]
    Singularity { i: usize, j: usize },

    #[error("ground-truth integration failed at step {step}: {source}")]
    Integration {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite state at integrator iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}; model restored to the last good checkpoint")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("fraction {num}/{den} does not land on a stored step for tau = {tau}; choose tau divisible by {den}")]
    Fraction { num: usize, den: usize, tau: usize },

    #[error("horizon {horizon} is not available: {reason}")]
    Horizon { horizon: f64, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
