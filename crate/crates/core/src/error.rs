//! Error taxonomy shared by every module in the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the toolkit.
///
/// Variants are coarse on purpose: callers dispatch on the kind (bad
/// configuration vs. bad data vs. numerical breakdown), the message carries
/// the specifics.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value or inconsistent configuration.
    Config(String),
    /// Dataset or batch violates a structural requirement.
    Data(String),
    /// Tensor shape mismatch.
    Shape(String),
    /// Input outside an operation's mathematical domain.
    Domain(String),
    /// Operation called in the wrong order (e.g. backward without forward).
    State(String),
    /// Non-finite value where a finite one is required.
    Numerical(String),
    /// Index or class label out of range.
    Range(String),
    /// Evaluation protocol violation (e.g. query identity absent from gallery).
    Protocol(String),
    /// Malformed input file; message names the offending location.
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Numerical(m) => write!(f, "numerical error: {m}"),
            Error::Range(m) => write!(f, "range error: {m}"),
            Error::Protocol(m) => write!(f, "protocol error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
