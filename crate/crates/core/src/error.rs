use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (mask/action mismatch,
    /// out-of-range timestep, and the like).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Inconsistent or infeasible configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A loss, gradient or parameter became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// The request is valid but too large to serve (e.g. enumeration).
    #[error("refused: {0}")]
    Refused(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use contract;
