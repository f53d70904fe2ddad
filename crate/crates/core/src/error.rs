use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SbmError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("size limit exceeded: n = {n} but at most {max} particles are supported")]
    Size { n: usize, max: usize },

    /// A parameter sits outside the domain where the requested object exists.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("numerical accuracy error: {0}")]
    Accuracy(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SbmError>;

pub(crate) fn argument(msg: impl Into<String>) -> SbmError {
    SbmError::Argument(msg.into())
}

/// The error raised when `rho + cos(pi/n) >= 0`.
pub(crate) fn criticality(n: usize, rho: f64) -> SbmError {
    let bound = (std::f64::consts::PI / n as f64).cos();
    SbmError::Domain(format!(
        "rho + cos(pi/n) >= 0 for n = {n}, rho = {rho}: need rho < -cos(pi/{n}) = {:.12}",
        -bound
    ))
}
