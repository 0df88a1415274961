use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading data or fitting alignments.
#[derive(Debug, Error)]
pub enum AlignError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero resolvable pairs")]
    EmptyLexicon,

    #[error("empty intersection between source and target vocabularies")]
    EmptyIntersection,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sgd diverged with learning rate {learning_rate}")]
    Diverged { learning_rate: f64 },
}

impl AlignError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AlignError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        AlignError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the caller's arguments rather than the data.
    pub fn is_usage(&self) -> bool {
        matches!(self, AlignError::InvalidArgument(_))
    }
}

pub type Result<T> = std::result::Result<T, AlignError>;
