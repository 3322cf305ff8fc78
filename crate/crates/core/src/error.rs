use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("loss diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("deformation folds: {0}")]
    FoldingDeformation(String),

    #[error("phantom does not fit: {0}")]
    PhantomFit(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },

    #[error("{path}: unexpected kind {found} (expected {expected})")]
    WrongKind {
        path: PathBuf,
        found: u8,
        expected: u8,
    },

    #[error("{path}: truncated payload ({found} bytes, expected {expected})")]
    TruncatedPayload {
        path: PathBuf,
        found: usize,
        expected: usize,
    },

    #[error("{path}: payload length mismatch ({found} bytes, expected {expected})")]
    LengthMismatch {
        path: PathBuf,
        found: usize,
        expected: usize,
    },

    #[error("{path}: malformed header: {detail}")]
    BadHeader { path: PathBuf, detail: String },

    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
