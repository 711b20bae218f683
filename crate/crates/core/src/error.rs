use thiserror::Error;

use crate::sampler::ChainState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Cholesky hit a non-positive pivot.
    #[error("factorization error: matrix not positive definite at pivot {pivot} (value {value:e})")]
    Factorization { pivot: usize, value: f64 },

    #[error("sampler error at iteration {iteration}: {message}")]
    Sampler {
        iteration: usize,
        message: String,
        state: Option<Box<ChainState>>,
    },

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    /// A rolling-study refit failed.
    #[error("refit at time {time} failed: {source}")]
    Refit { time: i64, source: Box<Error> },
}

impl Error {
    pub(crate) fn sampler(iteration: usize, message: impl Into<String>) -> Self {
        Error::Sampler {
            iteration,
            message: message.into(),
            state: None,
        }
    }

    /// Stable machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Data(_) => "data",
            Error::Shape(_) => "shape",
            Error::Factorization { .. } => "factorization",
            Error::Sampler { .. } => "sampler",
            Error::Diagnostics(_) => "diagnostics",
            Error::Refit { .. } => "refit",
        }
    }
}
