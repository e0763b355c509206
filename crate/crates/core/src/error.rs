use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("graph construction failed at edge record {index}: {reason}")]
    Construction { index: usize, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("label error: {0}")]
    Label(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("numerical fault in {op}: non-finite value produced")]
    NumericalFault { op: &'static str },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
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

    pub fn is_numerical_fault(&self) -> bool {
        matches!(self, Error::NumericalFault { .. })
    }
}
