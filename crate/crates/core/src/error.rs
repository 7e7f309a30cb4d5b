use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::pipeline::LossReport;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {context} at coordinate {index}")]
    NonFinite { context: &'static str, index: usize },
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("truncated IDX payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX dimensions overflow the address space")]
    DimensionOverflow,
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite loss at step {}", .0.step)]
    NonFiniteLoss(Box<LossReport>),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
