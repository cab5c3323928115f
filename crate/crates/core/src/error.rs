use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("temporal length {len} is shorter than kernel width {width}")]
    TemporalLength { len: usize, width: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("index {index} out of range (limit {limit}) in {what}")]
    Bounds {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("history of {got} frames is shorter than the required {need} (query + future)")]
    HistoryTooShort { got: usize, need: usize },

    #[error("sequence of {got} frames is too short for {what} (need at least {need})")]
    Length {
        what: &'static str,
        got: usize,
        need: usize,
    },

    #[error("skeleton mismatch: expected `{expected}`, found `{found}`")]
    Skeleton { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite coordinate at frame {frame}, joint {joint}")]
    Data { frame: usize, joint: usize },

    #[error("parameter/gradient mismatch for `{name}`: {detail}")]
    Consistency { name: String, detail: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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
