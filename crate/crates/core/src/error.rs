use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("autodiff error: {0}")]
    Autodiff(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("image codec error: {0}")]
    Codec(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
