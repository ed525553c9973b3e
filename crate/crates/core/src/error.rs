use thiserror::Error;

use crate::odesolve::OdeError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("spline: {0}")]
    Spline(String),

    #[error(transparent)]
    Ode(#[from] OdeError),

    /// The hazard exponent left the representable range of `exp`.
    #[error("hazard exponent overflow (psi = {psi:.3e})")]
    Overflow { psi: f64 },

    #[error("dataset has no events")]
    NoEvents,

    #[error("parameter length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("subject {index}: {source}")]
    Subject {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("information matrix is singular or indefinite (condition number {condition:.3e}); try fewer knots")]
    Singular { condition: f64 },

    #[error("study aborted: {failed} of {total} replicates failed")]
    StudyAborted { failed: usize, total: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Strips any per-subject wrapping.
    pub fn root(&self) -> &Error {
        match self {
            Error::Subject { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the failure stems from an exploding hazard rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self.root(),
            Error::Overflow { .. }
                | Error::Ode(OdeError::NonFinite { .. })
                | Error::Ode(OdeError::StepUnderflow { .. })
                | Error::Ode(OdeError::MaxSteps { .. })
        )
    }
}
