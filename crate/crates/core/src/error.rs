use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {what} at particle {index}")]
    Numeric { what: &'static str, index: usize },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("logic error: {0}")]
    Logic(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("population went extinct")]
    Extinction,

    #[error("step size too large: {0}")]
    StepSize(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for numeric failures of any kind.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Unsupported(_) => 2,
            Error::Io { .. } | Error::Json(_) => 2,
            _ => 3,
        }
    }
}

/// Fails with [`Error::Numeric`] unless every value is finite.
pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::Numeric { what, index }),
        None => Ok(()),
    }
}
