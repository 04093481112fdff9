use thiserror::Error;

use crate::mdp::MdpSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown {kind} `{name}`")]
    NotFound { kind: &'static str, name: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite state after integration step at t={time}: {state:?}")]
    Numerical { time: f64, state: Vec<f64> },

    #[error("scheme `{scheme}` is not supported for model `{model}`: {reason}")]
    UnsupportedScheme {
        scheme: &'static str,
        model: String,
        reason: &'static str,
    },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        last: Box<MdpSolution>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
