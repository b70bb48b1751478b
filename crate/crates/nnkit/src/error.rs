use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("non-finite gradient in parameter {index}")]
    NonFiniteGradient { index: usize },
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, expected: &[usize], actual: &[usize]) -> Result<T> {
    Err(NnError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    })
}
