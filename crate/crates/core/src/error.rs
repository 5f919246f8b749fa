use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    /// Training produced non-finite values; `last_good` holds the
    /// correspondence model as it was before the failing step.
    #[error("training diverged in epoch {epoch}: {cause}")]
    Diverged {
        epoch: usize,
        cause: String,
        last_good: Option<Box<crate::model::FccModel>>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}: line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
