use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An index (token id, class target, site) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration values.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed checkpoint file.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    /// Noise wrapper misuse.
    #[error("noise error: {0}")]
    Noise(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
