use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data quality: {0}")]
    DataQuality(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("insufficient data: {0}")]
    Size(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("integration blew up at t = {time}")]
    IntegrationBlowup { time: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("usage: {0}")]
    Usage(String),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(what: impl Into<String>) -> Error {
    Error::Dimension(what.into())
}
