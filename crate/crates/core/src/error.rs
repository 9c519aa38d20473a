use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the tensor engine, model assembly and training loop.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss became non-finite at step {step} (epoch {epoch})")]
    NanLoss { epoch: usize, step: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
