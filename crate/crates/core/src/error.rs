use std::time::Duration;

/// Errors raised by model construction, stepping and checking.
///
/// Numeric payloads are reported in `f64` regardless of the scalar type.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("g(x*) is rank deficient; the equilibrium control is not unique")]
    RankDeficient,

    #[error("equilibrium not assignable: residual {residual:e} exceeds bound {bound:e}")]
    NotAssignable { residual: f64, bound: f64 },

    #[error("step matrix I - (delta/2) N(u) Q is singular (condition estimate {condition:e})")]
    SingularStepMatrix { condition: f64 },

    #[error("Newton iteration did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("Newton Jacobian is singular (condition estimate {condition:e})")]
    SingularJacobian { condition: f64 },

    #[error("wrong trajectory mode: {0}")]
    WrongMode(String),

    #[error("step {step} failed after {elapsed:?}: {source}")]
    Step {
        step: usize,
        elapsed: Duration,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// The error underneath any `Step` wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for Newton/linear-solve failures (as opposed to bad inputs).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularStepMatrix { .. }
                | Error::NoConvergence { .. }
                | Error::SingularJacobian { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
