use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum KgeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: unknown {kind} `{name}` under a fixed vocabulary")]
    Vocabulary {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        name: String,
    },

    #[error("missing dataset files in {dir}: {missing:?}")]
    MissingFiles { dir: PathBuf, missing: Vec<String> },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    #[error("{what} hash mismatch: checkpoint has {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = KgeError> = std::result::Result<T, E>;

impl KgeError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        KgeError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KgeError::Io {
            path: path.into(),
            source,
        }
    }
}
