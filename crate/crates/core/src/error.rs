use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {file}: {reason}")]
    Format { file: PathBuf, reason: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("model error: {0}")]
    Model(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("scheduler error: {0}")]
    Scheduler(String),

    #[error("attack error: {0}")]
    Attack(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("non-finite {term} at epoch {epoch}")]
    NonFinite { term: &'static str, epoch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
