use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation diverged at step {step} (state norm {norm:.3e})")]
    DivergedSimulation { step: usize, norm: f64 },

    #[error("iteration diverged at iteration {iteration} (iterate norm {norm:.3e})")]
    Diverged { iteration: usize, norm: f64 },

    #[error("particle weights degenerate at step {step}")]
    DegenerateWeights { step: usize },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("non-finite state estimate at step {step}")]
    NonFiniteEstimate { step: usize },

    #[error("non-finite prior at step {step}")]
    NonFinitePrior { step: usize },

    #[error("non-finite state")]
    NonFiniteState,

    #[error("observation Jacobian is rank deficient (H^T H not invertible)")]
    RankDeficientH,

    #[error("I - K H is singular")]
    SingularUpdate,

    #[error("empty input")]
    EmptyInput,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at {path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (as opposed to bad inputs or files).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::DivergedSimulation { .. }
                | Error::Diverged { .. }
                | Error::DegenerateWeights { .. }
                | Error::NonFiniteLoss
                | Error::NonFiniteEstimate { .. }
                | Error::NonFinitePrior { .. }
                | Error::NonFiniteState
                | Error::RankDeficientH
                | Error::SingularUpdate
        )
    }
}
