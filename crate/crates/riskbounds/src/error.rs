//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("domain error in `{node}` at x = {x}")]
    Domain { node: &'static str, x: f64 },

    #[error("invalid model: {reason}")]
    InvalidModel { reason: String },

    #[error("quadrature failure: {reason}")]
    Quadrature { reason: String },

    #[error("step size underflow near x = {x} (coefficient singularity?)")]
    StepSizeUnderflow { x: f64 },

    #[error("ODE residual {observed:.3e} exceeds bound {bound:.3e} at x = {x}")]
    ResidualExceeded { x: f64, observed: f64, bound: f64 },

    #[error("bracket growth exhausted while {what}")]
    BracketExhausted { what: String },

    #[error("candidate set at lambda = {lambda} is empty")]
    EmptyCandidate { lambda: f64 },

    #[error("no positive solution exists at lambda = 0; no critical eigenvalue")]
    NoPositiveSolutionAtZero,

    #[error("unresolved verdict: {what}")]
    Unresolved { what: String },

    #[error("slope offset c = {c} exceeds the maximal slope (c must be <= 0)")]
    SlopeExceedsMaximal { c: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
