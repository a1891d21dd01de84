use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// The CLI maps these onto exit codes: configuration problems exit with 2,
/// solver problems with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite energy: {0}")]
    NonFinite(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("unstable force constants: {0}")]
    Instability(String),
    #[error("moment basis is rank deficient: {0}")]
    Basis(String),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("line search failed at residual {residual:.3e}: {reason}")]
    LineSearch { residual: f64, reason: String },
    #[error("linear solve failed after {iterations} iterations (relative residual {residual:.3e})")]
    LinearSolve { iterations: usize, residual: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the nonlinear or linear solvers, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Convergence { .. }
                | Error::LineSearch { .. }
                | Error::LinearSolve { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
