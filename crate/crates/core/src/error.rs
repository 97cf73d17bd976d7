use thiserror::Error;

/// Errors produced by the market engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("negative input: {0}")]
    Negative(&'static str),
    #[error("index mismatch: expected {expected} entries for {what}, got {got}")]
    IndexMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty edge set for {0}")]
    EmptyEdgeSet(&'static str),
    #[error("infeasible bounds: {0}")]
    InfeasibleBounds(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid topology is not a tree rooted at the slack bus: {0}")]
    NotATree(String),
    #[error("bus/prosumer assignment incomplete: {0}")]
    BusAssignment(String),
    #[error("step-size bound undefined: consumer utility is flat on part of [{y_min}, {y_max}] (knee at {knee})")]
    FlatBranch { y_min: f64, y_max: f64, knee: f64 },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("oracle failed to reach tolerance {tol} within {iters} iterations (residual {residual})")]
    OracleTolerance { tol: f64, iters: usize, residual: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
