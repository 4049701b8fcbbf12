use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e} exceeds {tol:.3e})")]
    NotSymmetric { asymmetry: f64, tol: f64 },

    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix contains a non-finite entry")]
    NonFinite,

    #[error("closed loop is not strictly stable (spectral radius {spectral_radius:.9})")]
    NotStable { spectral_radius: f64 },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("malformed problem: {0}")]
    MalformedProblem(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("X is singular (minimum eigenvalue {min_eigenvalue:.3e})")]
    SingularX { min_eigenvalue: f64 },

    #[error("estimator Riccati recursion did not converge after {iterations} iterations; (A, C) may not be detectable")]
    NotObservable { iterations: usize },
}
