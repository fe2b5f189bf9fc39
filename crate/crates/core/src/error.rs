use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed {file}: {message}")]
    Parse { file: String, message: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("spot {spot_id} has zero library size")]
    ZeroLibrary { spot_id: String },
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("degenerate statistic: {0}")]
    Degenerate(String),
    #[error("not enough rankable genes: need {needed}, have {available}")]
    NotEnoughGenes { needed: usize, available: usize },
    #[error("unknown spot coordinate ({row}, {col})")]
    UnknownSpot { row: i64, col: i64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::Parse { .. }
                | Error::ShapeMismatch(_)
                | Error::InvalidDataset(_)
                | Error::InvalidArgument(_)
                | Error::ZeroLibrary { .. }
                | Error::AlreadyNormalized
                | Error::NotEnoughGenes { .. }
                | Error::Checkpoint(_)
                | Error::UnknownSpot { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
