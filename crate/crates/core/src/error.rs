use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    /// A combinatorial computation would exceed its configured work budget.
    #[error("complexity exceeded: {what} needs {needed} units, budget is {budget}")]
    ComplexityExceeded {
        what: &'static str,
        needed: u64,
        budget: u64,
    },

    /// An enumeration left more probability mass uncovered than allowed.
    #[error("tail budget exceeded: uncovered mass {tail:.3e} > budget {budget:.3e}")]
    TailBudgetExceeded { tail: f64, budget: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
