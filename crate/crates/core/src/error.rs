//! Error type shared by every module of the library.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point {point:?} lies outside the chart box")]
    OutsideDomain { point: Vec<f64> },

    #[error("Gram matrix is not positive definite at {point:?} (min eigenvalue {min_eig:e})")]
    DegenerateGram { point: Vec<f64>, min_eig: f64 },

    #[error("convex solve did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("precondition violated: {what} (witness {witness:?})")]
    PreconditionViolated { what: String, witness: Vec<f64> },

    #[error("tolerance {requested:e} not reached, best achieved {achieved:e}")]
    ToleranceUnachievable { requested: f64, achieved: f64 },

    #[error("anchor construction failed at {anchor:?}: {reason}")]
    AnchorFailure { anchor: Vec<f64>, reason: String },

    #[error("cover refinement cap reached at depth {depth} near {point:?}: {reason}")]
    RefinementCap {
        depth: usize,
        point: Vec<f64>,
        reason: String,
    },

    #[error("path leaves the chart box at t = {t}")]
    LeftDomain { t: f64 },

    #[error("target not reachable: {0}")]
    Unreachable(String),

    #[error("unknown gallery entry `{0}`")]
    UnknownStructure(String),
}

pub type Result<T> = std::result::Result<T, Error>;
