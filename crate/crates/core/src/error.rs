use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, hyperparameters or specs that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violating a contract (non-binary masks, empty ground truth, ...).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity appeared during a computation.
    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
