use dmlf_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DmlfError>;

#[derive(Debug, Error)]
pub enum DmlfError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("vocabulary error: token id {id} >= vocab size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DmlfError {
    /// Short machine-parsable category, used for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            DmlfError::Tensor(TensorError::Config(_)) | DmlfError::Config(_) => "config",
            DmlfError::Tensor(_) | DmlfError::Numeric(_) => "numeric",
            DmlfError::Data(_) | DmlfError::Alignment(_) | DmlfError::Vocabulary { .. } => "data",
            DmlfError::Checkpoint(_) => "checkpoint",
            DmlfError::Io(_) => "io",
            DmlfError::Json(_) => "json",
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DmlfError::Config(msg.into()))
}
