use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("inner update diverged at step {step}")]
    Diverged { step: usize },

    #[error("meta-training diverged at outer iteration {iteration}: {reason}")]
    MetaDiverged { iteration: usize, reason: String },

    #[error("planning failed: all {candidates} candidate trajectories scored -inf")]
    PlanningFailed { candidates: usize },

    #[error("episode aborted at step {step}: {source}")]
    Episode {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
