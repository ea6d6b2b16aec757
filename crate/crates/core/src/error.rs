use std::path::PathBuf;

use mznet_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid synthesis spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed image: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
