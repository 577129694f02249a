//! Error type of the command-line front end and its exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or other failure |
//! | 2 | usage error |
//! | 3 | config, grid or model file that does not parse or validate |
//! | 4 | power flow did not converge |
//! | 5 | grid fingerprint mismatch |

use std::path::Path;

use demads_core::eval::EvalError;
use demads_core::grid::GridError;
use demads_core::load_estimation::EstimatorError;
use demads_core::orchestrator::OrchestratorError;
use demads_core::rt::RtError;
use demads_core::scenario::ScenarioError;
use demads_core::svm::SvmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Convergence(String),
    #[error("{0}")]
    Fingerprint(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) | CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Parse(_) => 3,
            CliError::Convergence(_) => 4,
            CliError::Fingerprint(_) => 5,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn parse(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Parse(format!("{}: {e}", path.display()))
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        let msg = e.to_string();
        match e {
            GridError::NonConvergence { .. } => CliError::Convergence(msg),
            GridError::Io { .. } => CliError::Io(msg),
            _ => CliError::Parse(msg),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let msg = e.to_string();
        match e {
            ScenarioError::NonConvergence { .. } => CliError::Convergence(msg),
            ScenarioError::Grid(g) => g.into(),
            ScenarioError::Io { .. } => CliError::Io(msg),
            ScenarioError::InvalidCadence(_) | ScenarioError::InvalidConfig(_) => {
                CliError::Parse(msg)
            }
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        let msg = e.to_string();
        match e {
            EstimatorError::FingerprintMismatch { .. } => CliError::Fingerprint(msg),
            EstimatorError::NonConvergence(..) => CliError::Convergence(msg),
            EstimatorError::Grid(g) => g.into(),
            EstimatorError::Format(_) | EstimatorError::InvalidConfig(_) => CliError::Parse(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<RtError> for CliError {
    fn from(e: RtError) -> Self {
        let msg = e.to_string();
        match e {
            RtError::Scenario(s) => s.into(),
            RtError::Format(_) | RtError::InvalidConfig(_) => CliError::Parse(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<SvmError> for CliError {
    fn from(e: SvmError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        let msg = e.to_string();
        match e {
            OrchestratorError::NonConvergence { .. } => CliError::Convergence(msg),
            OrchestratorError::Estimator(e) => e.into(),
            OrchestratorError::Rt(e) => e.into(),
            OrchestratorError::InvalidConfig(_) => CliError::Parse(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        match e {
            EvalError::Grid(e) => e.into(),
            EvalError::Scenario(e) => e.into(),
            EvalError::Estimator(e) => e.into(),
            EvalError::Orchestrator(e) => e.into(),
            EvalError::InvalidConfig(_) => CliError::Parse(msg),
            EvalError::Io { .. } => CliError::Io(msg),
            _ => CliError::Other(msg),
        }
    }
}
