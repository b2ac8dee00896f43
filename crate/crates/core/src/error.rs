use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward seed must be a scalar node, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("class {class} out of range for a model with {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("method {method} is undefined for this architecture: {reason}")]
    MethodUndefined { method: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("memorization precondition unmet: train accuracy {measured:.4} <= required {required:.4}")]
    Memorization { measured: f64, required: f64 },

    #[error("bad IDX magic {found:#010x} in {path} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("IDX payload mismatch in {path}: header declares {declared} bytes, found {found}")]
    PayloadMismatch {
        path: PathBuf,
        declared: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
