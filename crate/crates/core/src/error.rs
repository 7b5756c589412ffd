use thiserror::Error;

/// Errors surfaced by tensor ops, layers and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("train-mode normalization needs a batch of at least 2, got {n}")]
    BatchTooSmall { n: usize },

    #[error("branch index {index} out of range for {count} branches")]
    BranchOutOfRange { index: usize, count: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite gradient during {context}")]
    NonFiniteGrad { context: String },

    #[error("degenerate linear classifier: weight vector is zero")]
    ZeroWeight,

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
