use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not positive definite at pivot {pivot} (value {value:e}); increase jitter")]
    Singular { pivot: usize, value: f64 },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("class {class} has {available} samples, {required} required")]
    InsufficientSamples {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("premise violated: {0}")]
    Premise(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
