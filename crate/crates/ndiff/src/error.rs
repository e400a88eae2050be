use thiserror::Error;

pub type Result<T> = std::result::Result<T, NdiffError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("triangular matrix is singular (zero diagonal at {index})")]
    Singular { index: usize },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("{0}")]
    Contract(String),
}

impl NdiffError {
    pub(crate) fn shapes(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NdiffError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
