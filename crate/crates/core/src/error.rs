use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("current π_-{agent} has no dataset support")]
    NoSupport { agent: usize },

    #[error("ν solve did not converge after {iterations} iterations (|grad|∞ = {grad_norm:.3e}, objective = {objective})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        objective: f64,
    },

    #[error("objective overflowed at ν with max |ν| = {max_abs_nu:.3e}; use the stable log-sum-exp form")]
    Overflow { max_abs_nu: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors raised by a numerical solver rather than by bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NoSupport { .. }
                | Error::NoConvergence { .. }
                | Error::Overflow { .. }
                | Error::Singular(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
