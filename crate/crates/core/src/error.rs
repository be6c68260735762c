use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("catalog error at row {row}: {message}")]
    Catalog { row: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("image '{image_id}': {message}")]
    Image { image_id: String, message: String },

    #[error("unknown backbone '{name}' (known: {known})")]
    UnknownBackbone { name: String, known: String },

    #[error("pretrained weights for '{backbone}' not found{}", .path.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default())]
    MissingPretrained { backbone: String, path: Option<PathBuf> },

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("checkpoint {}: {message}", .path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (learning rate {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownBackbone { .. } => ErrorKind::Config,
            Error::Catalog { .. }
            | Error::Integrity(_)
            | Error::Split(_)
            | Error::Image { .. }
            | Error::MissingPretrained { .. }
            | Error::Checkpoint { .. }
            | Error::SpecMismatch(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::InvalidInput(_) | Error::NonFiniteLoss { .. } | Error::Json(_) => ErrorKind::Runtime,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
