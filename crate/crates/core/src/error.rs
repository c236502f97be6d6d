use thiserror::Error;

/// Errors raised by the solvers, the simulator and the experiment drivers.
#[derive(Debug, Error)]
pub enum LqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Integration or simulation produced NaN/inf. Signals blow-up.
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error("grid misalignment: {0}")]
    Grid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("requested M = {requested} exceeds the {available} recorded episodes")]
    EpisodeRange { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LqError>;
