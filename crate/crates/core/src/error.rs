use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or hyper-parameters that cannot be combined.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structure rejected by one of the compatibility rules.
    #[error("structure rejected by rule `{rule}`: {reason}")]
    Incompatible { rule: &'static str, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("non-finite loss at step {step}; parameters left at the last good state")]
    NonFiniteLoss { step: usize },

    #[error("ingestion error at byte offset {offset}: {reason}")]
    Ingestion { offset: u64, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
