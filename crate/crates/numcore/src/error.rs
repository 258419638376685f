/// Numeric engine errors.
///
/// `Contract` marks caller mistakes (shape mismatches, bad axes, empty
/// inputs). `NonFinite` marks NaN/Inf appearing in an operation's output;
/// callers are expected to treat it as a failed run, not a recoverable
/// condition.
#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("{op}: non-finite values in output")]
    NonFinite { op: &'static str },
}

impl NumError {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        NumError::Contract { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, NumError>;
