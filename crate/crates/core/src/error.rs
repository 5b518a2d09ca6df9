use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's precondition (shape, axis, index).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A model, task or training configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Loading a checkpoint failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
