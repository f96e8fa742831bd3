use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("block {block}: no cluster state available")]
    MissingClusterState { block: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("k-means needs at least {clusters} points, got {points}")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("invalid probability table: {0}")]
    Probability(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("checkpoint: bad magic bytes")]
    CheckpointMagic,

    #[error("checkpoint: file is truncated")]
    CheckpointTruncated,

    #[error("checkpoint: unsupported version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("idx: bad magic number {found:#010x}, expected {expected:#010x}")]
    IdxMagic { found: u32, expected: u32 },

    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("idx: file is truncated")]
    IdxTruncated,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
