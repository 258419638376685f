use numcore::NumError;

/// Failure categories for a whole run. Each maps to a stable process exit
/// status so scripts can tell config mistakes from data problems from
/// numerical blow-ups.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Bad or missing configuration; `path` is the offending key path.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    /// Malformed or insufficient input data.
    #[error("data error: {0}")]
    Data(String),
    /// NaN/Inf or a violated numeric contract inside the engine.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        RunError::Config { path: path.into(), msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        RunError::Data(msg.into())
    }

    /// Process exit status: 2 config, 3 data, 4 numeric, 5 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config { .. } => 2,
            RunError::Data(_) => 3,
            RunError::Numeric(_) => 4,
            RunError::Io(_) => 5,
        }
    }
}

impl From<NumError> for RunError {
    fn from(e: NumError) -> Self {
        RunError::Numeric(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RunError>;
