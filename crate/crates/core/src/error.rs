use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("cholesky breakdown: non-positive pivot at index {pivot}")]
    Factorization { pivot: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradientGate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("oracle failure: {message} (estimate {estimate})")]
    Oracle { message: String, estimate: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
