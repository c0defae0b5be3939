use thiserror::Error;

/// Errors produced by the solvers, steppers and registries.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite state produced at step {step}")]
    NonFinite { step: usize },

    #[error("order saturated: error {error:.3e} at the largest step is already at round-off level")]
    OrderSaturated { error: f64 },

    #[error("composition part {part} failed: {source}")]
    PartFailed {
        part: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step size {h} is too large: {reason}")]
    StepSize { h: f64, reason: String },

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wrap an error with the index of the step that produced it.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::StepFailed { .. } => e,
            e @ Error::NonFinite { .. } => e,
            e => Error::StepFailed {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Step index carried by the error, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::StepFailed { step, .. } | Error::NonFinite { step } => Some(*step),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
