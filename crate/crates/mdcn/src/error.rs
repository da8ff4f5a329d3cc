//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iter}: non-finite {component}")]
    NonFiniteLoss { iter: usize, component: &'static str },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("verification error: {0}")]
    Verify(String),

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
