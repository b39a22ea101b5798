use std::path::PathBuf;

use crate::gateway::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("no ratings")]
    NoRatings,

    #[error("no collaborative context")]
    NoCollaborativeContext,

    #[error("no unseen candidates")]
    NoUnseenCandidates,

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("schema error: missing column `{0}`")]
    Schema(String),

    #[error("backend error: {0}")]
    Backend(#[from] BackendError),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("resume refused: output directory belongs to config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
