use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corpus contains no tokens")]
    EmptyCorpus,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("invalid token id {id} for vocabulary of {len} ids")]
    InvalidId { id: u32, len: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    EmbeddingDim { expected: usize, found: usize },

    #[error("target sequence does not end with the end-of-sentence id")]
    MissingEos,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
