use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("id {id} is outside the vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("vocabulary of size {0} is too small to sample a negative (need at least 2)")]
    DegenerateVocabulary(usize),

    #[error("non-finite value while evaluating coordinate {coordinate}: {value}")]
    Numeric { coordinate: usize, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate sequence: {0}")]
    DegenerateSequence(String),

    #[error("degenerate metric input: {0}")]
    DegenerateMetric(String),

    #[error("parse error at line {line}, column {column}: {reason}")]
    Parse {
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
