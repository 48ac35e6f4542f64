use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dfab_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("worker {worker} failed: {message}")]
    WorkerFailed { worker: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid cluster configuration: {0}")]
    Config(String),

    #[error("training aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        /// Most recent checkpoint written before the failure.
        checkpoint: Option<PathBuf>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn protocol(message: impl Into<String>) -> Self {
        Error::Protocol(message.into())
    }
}
