use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("dataset too small: split `{split}` has {rows} rows, need at least {needed}")]
    DatasetTooSmall {
        split: String,
        rows: usize,
        needed: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::DatasetTooSmall { .. } => "dataset_too_small",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
