use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("degenerate row in {op}: every entry of row {row} is masked")]
    DegenerateRow { op: &'static str, row: usize },

    #[error("degenerate reduction in {op}: {msg}")]
    Degenerate { op: &'static str, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("function is not reproducible: {0}")]
    Reproducibility(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub(crate) fn shape_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        msg: msg.into(),
    }
}
