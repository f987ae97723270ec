//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, broadcast, member counts).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared where finite arithmetic was required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Dataset- or example-level problem (empty split, single-class labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// An API contract was violated (backward on a non-scalar, reused tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed checkpoint or report file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Parameter(_) | Error::Contract(_) | Error::Format(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Domain(_) | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
