//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("no convergence after {iterations} iterations: {context}")]
    NoConvergence { iterations: usize, context: String },

    #[error("integer overflow at step {step}: |Y| would exceed 2^62")]
    Overflow { step: usize },

    #[error("series too short: need more than {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("power moment diverges (partial sums exceeded 1e12)")]
    Diverges,

    #[error("degenerate tail: top order statistics are all equal")]
    DegenerateTail,

    #[error("zero variance series")]
    ZeroVariance,

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("non-positive conditional variance at index {index}")]
    NonpositiveVariance { index: usize },

    #[error("not supported: {0}")]
    NotSupported(String),

    #[error("inner optimizer failed: all starts exceeded the iteration cap")]
    InnerOptFailed,

    #[error("negative operand: random sum requires X >= 0, got {0}")]
    NegativeOperand(i64),

    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code category: 2 for bad input/config, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_)
            | Error::TooShort { .. }
            | Error::ParseError { .. }
            | Error::InvalidConfig(_)
            | Error::NegativeOperand(_)
            | Error::Io(_) => 2,
            _ => 3,
        }
    }

    /// Short machine-parsable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::SingularMatrix(_) => "singular_matrix",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Overflow { .. } => "overflow",
            Error::TooShort { .. } => "too_short",
            Error::Diverges => "diverges",
            Error::DegenerateTail => "degenerate_tail",
            Error::ZeroVariance => "zero_variance",
            Error::NumericalBreakdown(_) => "numerical_breakdown",
            Error::NonpositiveVariance { .. } => "nonpositive_variance",
            Error::NotSupported(_) => "not_supported",
            Error::InnerOptFailed => "inner_opt_failed",
            Error::NegativeOperand(_) => "negative_operand",
            Error::ParseError { .. } => "parse_error",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
