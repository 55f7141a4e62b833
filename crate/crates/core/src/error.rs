use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named primitive.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The oracle query budget would be exceeded.
    #[error("query budget exhausted: {used} of {budget} queries used, {requested} requested")]
    Budget { used: u64, budget: u64, requested: u64 },

    /// Covariance could not be factorised even after ridge regularisation.
    #[error("covariance is singular after ridge {ridge}: condition estimate {condition:e}; increase the ridge")]
    Singular { ridge: f64, condition: f64 },

    /// Malformed binary or text input.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Configuration errors (unknown keys, unparsable values).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Prefix the message of numeric errors with a location, leaving other kinds untouched.
    pub fn in_context(self, context: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric(msg) => Error::Numeric(format!("{context}: {msg}")),
            Error::Domain(msg) => Error::Domain(format!("{context}: {msg}")),
            other => other,
        }
    }
}
