use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was invoked on state that violates its precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("out of KV-cache blocks: request {request} needs {needed} more block(s), {free} free at t={time_ms} ms")]
    OutOfKvBlocks {
        request: u64,
        needed: u64,
        free: u64,
        time_ms: f64,
    },

    #[error("infeasible SLO: {0}")]
    InfeasibleSlo(String),

    #[error("calibration failed: {reason}")]
    Calibration {
        reason: String,
        unconstrained: Vec<String>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("percentile of an empty series")]
    EmptySeries,

    #[error("simulation aborted after {iterations} iterations (cap reached)")]
    Aborted { iterations: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
