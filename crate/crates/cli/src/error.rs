use std::path::Path;

use bsvie_core::scenario::ScenarioError;
use bsvie_core::verify::VerifyError;
use thiserror::Error;

/// Exit 1 for domain and verification failures, exit 2 for the environment.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Failed(String),
    #[error("{0}")]
    Environment(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(_) | CliError::Failed(_) => 1,
            CliError::Environment(_) => 2,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Environment(format!("{}: {e}", path.display()))
    }

    pub fn scenario(e: ScenarioError, base_dir: &Path) -> Self {
        match &e {
            ScenarioError::Io { .. } => CliError::Environment(e.to_string()),
            ScenarioError::Table { path, .. } if !base_dir.join(path).exists() => {
                CliError::Environment(e.to_string())
            }
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<bsvie_core::resolvent::ResolventError> for CliError {
    fn from(e: bsvie_core::resolvent::ResolventError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<bsvie_core::solver::SolverError> for CliError {
    fn from(e: bsvie_core::solver::SolverError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<bsvie_core::simulate::SimulateError> for CliError {
    fn from(e: bsvie_core::simulate::SimulateError) -> Self {
        CliError::Domain(e.to_string())
    }
}
