use std::fmt;

/// Errors raised by the estimator library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid basis specification: {0}")]
    Basis(String),

    #[error("coordinate {index} = {value} lies outside [0, 1]")]
    OutOfDomain { index: usize, value: f64 },

    #[error("quadrature uses {nodes} nodes per dimension but the basis resolves {required} cells")]
    QuadratureTooCoarse { nodes: usize, required: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("h1 changes sign within the sample (record {record}, value {value}, expected {expected})")]
    SignViolation {
        record: usize,
        value: f64,
        expected: SignKind,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("enumeration guard exceeded: {0}")]
    Guard(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The sign class a functional's `h1` is required to have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignKind {
    NonNegative,
    NonPositive,
}

impl fmt::Display for SignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignKind::NonNegative => write!(f, "h1 >= 0"),
            SignKind::NonPositive => write!(f, "h1 <= 0"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
