use std::io;
use std::path::PathBuf;

use caffnet_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const EMPTY_CANDIDATES: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{0}")]
    Format(String),

    #[error("suite `{0}` failed")]
    Verify(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Format(_) => exit::CONFIG,
            CliError::Core(e) => match e {
                CoreError::InvalidArgument(_) => exit::CONFIG,
                CoreError::Divergence { .. } | CoreError::NonFiniteState { .. } => exit::DIVERGENCE,
                CoreError::EmptyCandidateSet(_) => exit::EMPTY_CANDIDATES,
                _ => exit::FAILURE,
            },
            CliError::Verify(_) => exit::FAILURE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use caffnet_core::layer::ProjectionCandidate;
    use caffnet_core::{IndexCombination, Vector};

    #[test]
    fn codes_are_stable() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(CoreError::Divergence { epoch: 3 }).exit_code(), 3);
        assert_eq!(CliError::Core(CoreError::NonFiniteState { step: 1 }).exit_code(), 3);
        let cand = ProjectionCandidate {
            gamma: IndexCombination::new(&[1]).unwrap(),
            y: Vector::zeros(1),
            residual: Vector::zeros(1),
            feasible: false,
            distance: 0.0,
        };
        assert_eq!(CliError::Core(CoreError::EmptyCandidateSet(Box::new(cand))).exit_code(), 4);
        assert_eq!(CliError::Verify("pinv".into()).exit_code(), 1);
        assert_eq!(CliError::Core(CoreError::InvalidArgument("x".into())).exit_code(), 2);
    }
}
