use thiserror::Error;

/// Errors shared across the corpus, model, and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("dimension error: expected {expected}, got {got} in {context}")]
    Dim {
        expected: String,
        got: String,
        context: String,
    },

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("parse error at {path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error in {path}: {message}")]
    Validation { path: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(expected: impl Into<String>, got: impl Into<String>, context: &str) -> Self {
        Error::Dim {
            expected: expected.into(),
            got: got.into(),
            context: context.to_string(),
        }
    }
}
