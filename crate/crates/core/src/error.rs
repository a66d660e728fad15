use thiserror::Error;

/// Failure modes shared by every module.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("argument {value} outside the domain {domain}")]
    Domain { value: f64, domain: String },
    #[error("Pinney amplitude collapsed at u = {u}")]
    Singular { u: f64 },
    #[error("step size underflow at u = {u}")]
    StepUnderflow { u: f64 },
    #[error("fixed-point iteration stalled after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for errors caused by bad input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Domain { .. })
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Domain { .. } => "domain",
            Error::Singular { .. } => "singular",
            Error::StepUnderflow { .. } => "step_underflow",
            Error::NotConverged { .. } => "not_converged",
            Error::Numerical(_) => "numerical",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
