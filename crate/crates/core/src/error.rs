use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed wire payload: {0}")]
    Wire(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("codec failure: {0}")]
    Codec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.0, a.1, b.0, b.1
    ))
}
