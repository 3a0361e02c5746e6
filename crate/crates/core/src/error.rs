use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("atom ({p}, {r}) lies outside the support box [{p_min}, {p_max}] x [{r_min}, {r_max}]")]
    OutOfSupport {
        p: f64,
        r: f64,
        p_min: f64,
        p_max: f64,
        r_min: f64,
        r_max: f64,
    },

    #[error("rate {0} is not a central bank state")]
    UnknownRate(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("training diverged at outer {outer}, inner {inner}: loss {loss}")]
    Diverged { outer: usize, inner: usize, loss: f64 },

    #[error("search tree of {size} nodes exceeds the budget of {budget}")]
    TreeBudget { size: u128, budget: u128 },

    #[error("state out of bounds: {0}")]
    StateOutOfBounds(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
