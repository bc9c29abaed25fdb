use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("numeric error: {op} produced a non-finite value")]
    Numeric { op: &'static str },

    #[error("state error: {0}")]
    State(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        msg: msg.into(),
    }
}
