use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid network: {0}")]
    Network(String),

    #[error("domain error in {system}: {bound}")]
    Domain { system: String, bound: String },

    #[error("non-finite value at sample {index}: {what}")]
    Numerical { index: usize, what: String },

    #[error("invalid set: {0}")]
    Set(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("grid of {points} points exceeds the cap of {cap}; request a coarser tau")]
    Resource { points: u128, cap: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }
}
