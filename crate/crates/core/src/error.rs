use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument, dimension, or configuration value.
    #[error("parameter error: {0}")]
    Param(String),

    /// A stateful object (decode state, optimizer) was used out of order or past capacity.
    #[error("state error: {0}")]
    State(String),

    /// Data produced by one stage violates an invariant another stage relies on.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("loss is undefined: every target cell is masked")]
    EmptyLoss,

    #[error("non-finite loss {loss} at step {step} (batch seed {batch_seed:#018x})")]
    NonFinite { step: usize, loss: f64, batch_seed: u64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
