use std::path::PathBuf;

/// Crate-wide error type.
///
/// The variants mirror the failure classes surfaced by the public
/// operations: shape/range/argument violations from the numeric layers,
/// configuration problems (always carrying the offending key path), and
/// missing artifacts (datasets or checkpoints a stage depends on).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("non-finite value at sampling step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            _ => 1,
        }
    }
}
