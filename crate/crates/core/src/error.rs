use thiserror::Error;

use crate::solver::PrimalState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("argument {value} outside the domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("value {value} is not below the recession slope {limit}")]
    OutOfRange { value: f64, limit: f64 },

    #[error("|T0| = {norm} violates the coercivity bound {limit}")]
    CoercivityViolation { norm: f64, limit: f64 },

    #[error("recession coefficient did not settle: f(T)/T = {at_1e6} at 1e6 and {at_1e7} at 1e7")]
    RecessionEstimate { at_1e6: f64, at_1e7: f64 },

    #[error("invalid integrand table: {0}")]
    Table(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("field shape mismatch: {0}")]
    Shape(String),

    #[error("cell path is not a closed edge-connected loop: {0}")]
    OpenPath(String),

    #[error("no interior cells at margin {margin}")]
    EmptyInterior { margin: usize },

    #[error("matrix not positive definite at row {row}")]
    NotPositiveDefinite { row: usize },

    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, state: Box<PrimalState> },

    #[error("line search failed at iteration {iteration} (residual {residual:e})")]
    LineSearch { iteration: usize, residual: f64, state: Box<PrimalState> },

    #[error("continuation schedule must be non-empty and strictly increasing")]
    Schedule,

    #[error("negative radicand {value:e} in cell {cell}")]
    NegativeRadicand { cell: usize, value: f64 },

    #[error("need at least {needed} snapshots, got {got}")]
    TooFewSnapshots { needed: usize, got: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
