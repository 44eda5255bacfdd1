use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("recording too short: {len} samples, need at least {min}")]
    Length { len: usize, min: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("window {index} at sample {start} overruns recording of {len} samples (period {period})")]
    Bounds {
        index: usize,
        start: usize,
        period: usize,
        len: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("house {0} not present in dataset")]
    HouseNotFound(i64),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("class `{0}` has no training features")]
    EmptyClass(String),

    #[error("every training restart diverged")]
    Diverged,

    #[error("invalid model file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
