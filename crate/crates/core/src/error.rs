use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A point cloud whose byte length is not a multiple of the record size.
    #[error("truncated point cloud: partial record at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },

    #[error("{field} value {value} at point {index} does not fit in 16 bits")]
    IdOverflow {
        index: usize,
        field: &'static str,
        value: u32,
    },

    #[error("score {value} at point {index} is outside [0, 1]")]
    ScoreRange { index: usize, value: f32 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("vocabulary config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("raw label ids not covered by the vocabulary: {ids:?}")]
    Mapping { ids: Vec<u32> },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("scoring failed on node {node}: {source}")]
    Scorer {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("aggregation error: {0}")]
    Aggregation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
