use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{table}: index {index} out of range for {size} rows")]
    IndexOutOfRange {
        table: String,
        index: usize,
        size: usize,
    },
    #[error("parameter {0} is trainable but has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(
    op: &'static str,
    expected: impl std::fmt::Debug,
    actual: impl std::fmt::Debug,
) -> Result<T> {
    Err(CoreError::ShapeMismatch {
        op,
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    })
}
