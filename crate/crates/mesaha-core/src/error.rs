use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents do not parse as the expected format.
    #[error("format error: {0}")]
    Format(String),
    /// An argument or constructed value violates a documented invariant.
    #[error("invalid value: {0}")]
    Validation(String),
    /// Two objects that must share dimensions do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A NaN or infinity surfaced where a finite number is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
