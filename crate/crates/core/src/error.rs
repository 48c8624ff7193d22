use std::path::PathBuf;

/// Errors raised by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("point cloud has zero spatial extent")]
    ZeroExtent,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("correspondence matrix is already scaled")]
    AlreadyScaled,

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("no training instances for category `{0}`")]
    EmptyCategory(String),

    #[error("target unreachable: {0}")]
    Unreachable(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("parse error in {}: {msg}", .path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
