use thiserror::Error;

/// Errors raised by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular transform: det(I + A) = {0}")]
    Singular(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by `{primitive}`")]
    Numeric { primitive: &'static str },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
