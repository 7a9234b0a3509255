use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no data: {0}")]
    NoData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate scale for resource `{resource}`: training portion is constant ({value})")]
    DegenerateScale { resource: String, value: f64 },

    #[error("series too short: need at least {needed} points, have {available}")]
    SeriesTooShort { needed: usize, available: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("model is untrained")]
    Untrained,

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("rank-deficient regressors (rank {rank} < {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },

    #[error("missing bundle for cluster `{0}`")]
    MissingBundle(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("benchmark lock held at {0}")]
    LockHeld(PathBuf),

    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
