use thiserror::Error;

/// Errors produced by the rollout, credit, objective and training machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite log-probability in trajectory {trajectory}, turn {turn}")]
    NonFiniteLogprob { trajectory: usize, turn: usize },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize, dump: String },

    #[error("token-in-token-out violation in trajectory {trajectory} at position {position}")]
    TokenMismatch { trajectory: usize, position: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
