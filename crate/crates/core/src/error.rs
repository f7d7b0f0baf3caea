use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::DistilledDataset;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] mdw_numeric::Error),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss in {stage} at step {step}")]
    NonFiniteLoss { stage: &'static str, step: usize },

    /// Distillation hit a non-finite loss; carries the last finite state.
    #[error("distillation aborted at step {step}: non-finite loss")]
    DistillAborted {
        step: usize,
        last_good: Box<DistilledDataset>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

/// Maps a non-finite numeric failure to [`Error::NonFiniteLoss`] at `step`.
pub(crate) fn at_step(stage: &'static str, step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Numeric(mdw_numeric::Error::NonFinite { .. }) => Error::NonFiniteLoss { stage, step },
        other => other,
    }
}
