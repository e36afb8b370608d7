use std::path::PathBuf;

/// Errors raised across the pipeline.
///
/// Variants split into validation failures (bad input, config or file
/// contents) and runtime failures (I/O, numerical divergence); the CLI maps
/// the former to exit code 1 and the latter to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate statistics: {0}")]
    Degenerate(String),
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("training diverged: loss term `{0}` is not finite")]
    Divergence(String),
    #[error("failed to load {path}: {source}")]
    Load { path: PathBuf, source: Box<Error> },
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { field: field.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when the failure stems from invalid input rather than the runtime.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. } | Error::NonFinite(_) | Error::Divergence(_) => false,
            Error::Load { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
