use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (size {size})")]
    Index {
        what: String,
        index: usize,
        size: usize,
    },

    #[error("sequence length {len} exceeds maximum position {max}")]
    Length { len: usize, max: usize },

    #[error("non-finite value produced by {0}")]
    Numeric(String),

    #[error("{0}")]
    Contract(String),

    #[error("empty attention context")]
    EmptyAttention,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{}invalid label {label:?}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    InvalidLabel { line: Option<usize>, label: String },

    #[error("label {label:?} is not in the label map of task {task:?}")]
    UnknownLabel { task: String, label: String },

    #[error("label id {id} out of range for task {task:?} with {classes} classes")]
    LabelRange {
        task: String,
        id: usize,
        classes: usize,
    },

    #[error("unknown task {task:?} (available: {})", available.join(", "))]
    UnknownTask {
        task: String,
        available: Vec<String>,
    },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}
