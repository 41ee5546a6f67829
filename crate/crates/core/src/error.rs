use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("token id {id} is outside the vocabulary (size {size})")]
    OutOfVocab { id: u32, size: u32 },

    #[error("template error: {0}")]
    Template(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("view {0} has no foreground pixels")]
    UndefinedView(usize),

    #[error("image format error: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Load failures are kept distinct so callers can tell a foreign file from a damaged one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
