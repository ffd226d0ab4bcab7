use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("loss node must be scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown variable id {0}")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::DimMismatch {
        op,
        detail: detail.into(),
    }
}
