use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("truncated payload in {what}: expected {expected} bytes, found {actual}")]
    Length {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("support mismatch: {0}")]
    Support(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the CLI; one code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Config(_) => 3,
            Error::Format(_) => 4,
            Error::Length { .. } => 5,
            Error::Version { .. } => 6,
            Error::Shape { .. } | Error::Contract(_) | Error::Spec(_) | Error::Domain(_) => 7,
            Error::Numeric(_) | Error::NoConvergence { .. } => 8,
            Error::Support(_) => 9,
        }
    }
}
