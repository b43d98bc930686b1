use std::path::PathBuf;

use hipa_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HipaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unsupported scale {0} (expected 2, 3 or 4)")]
    UnsupportedScale(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{path}: unsupported color type {color}")]
    UnsupportedColorType { path: PathBuf, color: String },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("too small: {0}")]
    TooSmall(String),
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss {loss} at step {step} (batch {batch:?})")]
    NonFiniteLoss { step: u64, loss: f32, batch: Vec<String> },
}

pub type Result<T, E = HipaError> = std::result::Result<T, E>;

impl HipaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
