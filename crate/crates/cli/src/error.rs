use std::path::{Path, PathBuf};

use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] orbitmask::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use orbitmask::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::OutOfVocab { .. } | E::Template(_) | E::Contract(_) => EXIT_CONFIG,
                E::Io { .. } | E::Format(_) | E::Checkpoint(_) | E::Csv(_) => EXIT_IO,
                E::Numeric(_) | E::UndefinedView(_) => EXIT_NUMERIC,
            },
        }
    }
}
