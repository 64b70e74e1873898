use alloc::boxed::Box;
use alloc::string::String;

use crate::layer::ProjectionCandidate;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    SvdNonConvergence { rows: usize, cols: usize },

    /// No projection candidate satisfied the full system within tolerance.
    /// Carries the least-violating candidate.
    #[error("no feasible projection candidate (least violation {:.3e})", .0.max_violation())]
    EmptyCandidateSet(Box<ProjectionCandidate>),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("rollout produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
