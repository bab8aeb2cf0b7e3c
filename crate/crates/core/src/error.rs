use alloc::string::{String, ToString};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{0}: dimensions overflow the addressable size")]
    Overflow(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sparsity can only increase (current {current}, requested {requested})")]
    SparsityDecrease { current: f64, requested: f64 },
    #[error("backward called with a cache from a different parameter version")]
    StaleCache,
    #[error("alpha is zero; 1/alpha is undefined")]
    SingularAlpha,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("infeasible compression budget: {0}")]
    Infeasible(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
