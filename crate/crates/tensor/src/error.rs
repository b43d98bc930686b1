use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid hyperparameter for {op}: {msg}")]
    InvalidHyperparam { op: &'static str, msg: String },
    #[error("{op}: extent {extent} is not divisible by {by}")]
    NotDivisible {
        op: &'static str,
        extent: usize,
        by: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tensor that was not produced under a tape")]
    NoTape,
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn hyper(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidHyperparam {
        op,
        msg: msg.into(),
    }
}
