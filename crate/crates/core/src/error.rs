use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A precondition on shapes, names or arguments was violated.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    /// A loss term evaluated to NaN or infinity.
    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract { op, detail: detail.into() }
}

macro_rules! ensure {
    ($cond:expr, $op:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::contract($op, alloc::format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
