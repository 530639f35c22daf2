use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("branch depth {depth} cannot grow further (limit 63)")]
    BranchDepthOverflow { depth: u8 },

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite state {state:?} at t={time}")]
    NonFinite { state: Vec<f64>, time: f64 },

    #[error("`{first}` is incompatible with `{second}`: {reason}")]
    Incompatible {
        first: String,
        second: String,
        reason: String,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid value for `{key}`: {reason}")]
    Override { key: String, reason: String },

    #[error("rate fit needs {needed} usable rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("log-log fit requires positive values, got {value} in `{column}`")]
    NonPositive { column: String, value: f64 },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn incompatible(
        first: impl Into<String>,
        second: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Incompatible {
            first: first.into(),
            second: second.into(),
            reason: reason.into(),
        }
    }
}
