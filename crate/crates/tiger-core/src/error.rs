//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Everything that can go wrong across the purification stack.
///
/// Variants map onto the CLI exit-code contract: `Config` is a usage
/// error, `Ingestion`/`Lookup`/`Shape`/`Contract` are data errors, and
/// `Numerical`/`Training`/`Generation` are numerical failures.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor dimension mismatch.
    Shape(String),
    /// Invalid input record (duplicate edge, dangling endpoint, bad stream).
    Ingestion(String),
    /// Query for a node that does not exist at the current step.
    Lookup(String),
    /// A precondition of an operation was violated by the caller.
    Contract(String),
    /// Invalid configuration.
    Config(String),
    /// Numerical failure (non-convergence, non-finite values).
    Numerical(String),
    /// Training failure (non-finite loss or gradients).
    Training(String),
    /// Benchmark generation failure.
    Generation(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn ingestion(msg: impl Into<String>) -> Self {
        Error::Ingestion(msg.into())
    }
    pub fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
    pub fn generation(msg: impl Into<String>) -> Self {
        Error::Generation(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Ingestion(m) => write!(f, "ingestion error: {m}"),
            Error::Lookup(m) => write!(f, "lookup error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Numerical(m) => write!(f, "numerical error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
