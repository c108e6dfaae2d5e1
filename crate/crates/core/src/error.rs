//! Error type shared by the fitting and simulation routines.

use thiserror::Error;

/// Crate-level result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("AR(1) coefficient {rho} violates the stationarity margin |rho| <= {max_abs}")]
    Stationarity { rho: f64, max_abs: f64 },

    /// Cholesky failure on a matrix that should have been positive definite.
    /// `min_pivot` is the offending pivot (an estimate of how far from PD).
    #[error("matrix not positive definite in {context} (pivot {min_pivot:e})")]
    NotPositiveDefinite { context: &'static str, min_pivot: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("linearization produced a non-finite working value at row {row}")]
    Linearization { row: usize },

    #[error("degenerate fit: trace(S) = {trace} >= n = {n}")]
    DegenerateFit { trace: f64, n: usize },

    #[error("penalty selection failed: {0}")]
    LambdaSelection(String),

    #[error("M-step failure: {0}")]
    MStep(String),

    #[error("structural relevance undefined: component has zero variance")]
    DegenerateComponent,

    #[error(
        "fit diverged: working deviance increased for {count} consecutive iterations \
         (deviance trail {trail:?})"
    )]
    Diverged { count: usize, trail: Vec<f64> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation spec rejected: {0}")]
    SimSpec(String),
}
