use thiserror::Error;

/// Failure modes shared by every module of the crate.
///
/// The variants are grouped so that a front-end can map them onto distinct
/// exit codes: configuration problems, numerical failures, and resource
/// limits.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("operator is not positive definite (smallest eigenvalue {0:e})")]
    Indefinite(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("divergent: {0}")]
    Divergent(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::DimensionMismatch(_))
    }

    pub fn is_resource(&self) -> bool {
        matches!(self, Error::Resource(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
