use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(
        "gradient mismatch in parameter {param} element {index}: analytic {analytic:.6e}, numeric {numeric:.6e} (rel err {rel_error:.3e})"
    )]
    GradientMismatch {
        param: usize,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_error: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code: 2 for contract-style failures, 3 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::GradientMismatch { .. } => 3,
            _ => 2,
        }
    }
}
