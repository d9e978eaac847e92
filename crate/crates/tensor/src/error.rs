use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} on input {shape:?} would produce an empty output")]
    EmptyOutput { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor is not recorded on this tape")]
    DetachedTensor,
    #[error("tape was already consumed by a backward pass")]
    TapeConsumed,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("every key in the attention mask is hidden")]
    AllKeysMasked,
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
