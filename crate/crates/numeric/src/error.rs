use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("{op}: invalid argument: {details}")]
    InvalidArgument { op: &'static str, details: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericError>;

impl NumericError {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        NumericError::ShapeMismatch { op, details: details.into() }
    }

    pub fn invalid(op: &'static str, details: impl Into<String>) -> Self {
        NumericError::InvalidArgument { op, details: details.into() }
    }
}
