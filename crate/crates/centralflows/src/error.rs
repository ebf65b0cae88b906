use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("operator is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("did not converge: {0}")]
    NoConvergence(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("beta operator rejected: {0}")]
    BadBeta(String),
    #[error("run diverged: {0}")]
    Diverged(String),
    #[error("config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
