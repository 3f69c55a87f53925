use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure categories. The CLI maps each category onto its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCategory {
    Dimension,
    Numeric,
    Config,
    Statistics,
    Routing,
    Validation,
    Format,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("degenerate mean: {0}")]
    DegenerateMean(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension(_) => ErrorCategory::Dimension,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Config(_) => ErrorCategory::Config,
            Error::DegenerateStatistics(_) | Error::DegenerateMean(_) => ErrorCategory::Statistics,
            Error::Routing(_) => ErrorCategory::Routing,
            Error::Validation(_) => ErrorCategory::Validation,
            Error::Format { .. } => ErrorCategory::Format,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
