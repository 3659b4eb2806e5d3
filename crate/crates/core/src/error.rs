use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate passage id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("question {question_id:?}: {message}")]
    InvalidQuestion {
        question_id: String,
        message: String,
    },

    #[error("passage {0:?} not found")]
    NotFound(String),

    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),

    #[error("dimension mismatch: expected {expected}, got {actual}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: Option<String>,
    },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("unjoinable question ids: {}", .0.join(", "))]
    Unjoinable(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context: None,
        }
    }
}
