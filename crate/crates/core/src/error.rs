//! Error type shared across the engine.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, e.g. matmul inner dimensions.
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An index (class label, row, node id) outside its valid range.
    #[error("{what}: index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: String,
        index: usize,
        size: usize,
    },

    /// Malformed computation-graph usage (bad seed, foreign node, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Text-format parse failure; `line` is 1-based within the file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Batch composition cannot satisfy the requested quota.
    #[error("batch composition error: {0}")]
    Composition(String),

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("unknown dataset id {0}")]
    UnknownDataset(usize),

    /// Checkpoint file rejected (hash or structure mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite loss observed; training must abort.
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: u64, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
