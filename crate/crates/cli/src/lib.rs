//! Command-line pipelines over the `ccsynth` library: problem and gains
//! files, level planning, synthesis, simulation and factor curves.

pub mod commands;
pub mod gains;
pub mod problem;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("unstable: {0}")]
    Unstable(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Io(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Unstable(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }
}

impl From<ccsynth::Error> for CliError {
    fn from(e: ccsynth::Error) -> Self {
        use ccsynth::Error as E;
        let msg = e.to_string();
        match e {
            E::Infeasible(_) => CliError::Infeasible(msg),
            E::NotStable { .. } => CliError::Unstable(msg),
            E::NumericalFailure(_) | E::SingularX { .. } | E::NotObservable { .. } => CliError::Numerical(msg),
            E::DimensionMismatch(_)
            | E::NotSymmetric { .. }
            | E::NotPsd { .. }
            | E::NonFinite
            | E::OutOfRange(_)
            | E::MalformedProblem(_) => CliError::Parse(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
