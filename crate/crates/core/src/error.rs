use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reasons a skeleton table can be rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SkeletonIssue {
    #[error("missing or malformed header (expected `name,parent,swap`)")]
    BadHeader,
    #[error("expected 3 fields, found {0}")]
    FieldCount(usize),
    #[error("empty name")]
    EmptyName,
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("unknown parent `{0}`")]
    UnknownParent(String),
    #[error("unknown swap `{0}`")]
    UnknownSwap(String),
    #[error("parent cycle")]
    ParentCycle,
    #[error("keypoint swaps with itself")]
    SelfSwap,
    #[error("asymmetric swap")]
    AsymmetricSwap,
    #[error("empty skeleton")]
    Empty,
}

#[derive(Debug, Error)]
pub enum Error {
    /// `row` is the 1-based line number in the CSV, header included.
    #[error("{issue} at row {row}")]
    Skeleton { row: usize, issue: SkeletonIssue },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("manifest not found in {0}")]
    ManifestNotFound(PathBuf),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("checksum mismatch on {path}: expected {expected}, found {found}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unknown frame id {0}")]
    UnknownFrame(u64),

    #[error("pose has {found} rows but skeleton has {expected} keypoints")]
    PoseRows { expected: usize, found: usize },

    #[error("no annotated frames")]
    NoAnnotatedFrames,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
