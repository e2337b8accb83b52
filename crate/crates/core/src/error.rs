use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty context: a prompt needs at least one labelled example")]
    EmptyContext,

    #[error("dimension mismatch in {what} at index {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("{what} has shape {found:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{what} contains non-finite entries")]
    NonFiniteInput { what: &'static str },

    #[error("{what} is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{what} is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemiDefinite {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("quadratic view refused for d = {d}: H has (d+1)^4 entries, cap is d <= {cap}")]
    QuadraticTooLarge { d: usize, cap: usize },

    #[error("initial scale sigma = {sigma} violates the convergence hypothesis; admissible range is 0 < sigma < {max_sigma}")]
    InitScaleOutOfRange { sigma: f64, max_sigma: f64 },

    #[error("invalid initialization: {0}")]
    InvalidInit(String),

    #[error("invalid moments: {0}")]
    InvalidMoments(String),

    #[error("invalid coordinate law: {0}")]
    InvalidLaw(String),

    #[error("non-finite state at t = {time} after {steps} accepted steps (last good u_last = {last_u_last})")]
    NonFiniteState {
        time: f64,
        steps: usize,
        last_u_last: f64,
    },

    #[error("training diverged at step {step}: loss {loss:e} exceeds 1e6")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
