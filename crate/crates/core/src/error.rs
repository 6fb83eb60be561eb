use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operator or constructor was handed inputs that violate its contract.
    #[error("rejected input: {0}")]
    Rejected(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Rejected(_) => "rejected_input",
            Error::NonFinite(_) => "non_finite",
            Error::Infeasible(_) => "infeasible",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Mismatch(_) => "mismatch",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! reject {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Rejected(format!($($arg)*)))
    };
}
pub(crate) use reject;
