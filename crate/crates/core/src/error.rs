use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid hyperparameter or structural configuration.
    Config(String),
    /// A caller-side precondition was violated.
    Contract(String),
    /// A scalar came out NaN or infinite.
    NonFinite { what: String, value: f64 },
    /// Malformed binary payload.
    Format { offset: usize, reason: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension { op, lhs, rhs } => {
                write!(f, "dimension error in {op}: lhs={lhs:?}, rhs={rhs:?}")
            }
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::NonFinite { what, value } => write!(f, "non-finite value in {what}: {value}"),
            Self::Format { offset, reason } => {
                write!(f, "format error at byte offset {offset}: {reason}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
