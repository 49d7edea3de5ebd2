use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("data: {0}")]
    Data(String),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("generation: {0}")]
    Generation(String),

    #[error("training: {0}")]
    Training(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Numeric(#[from] retgen_numeric::NumericError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
