use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped loosely by the subsystem that raises them; the CLI
/// maps them onto exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("position ({x}, {y}) outside {w}x{h} patch grid")]
    OutOfGrid { x: usize, y: usize, w: usize, h: usize },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("image side {side} not divisible by patch size {patch}")]
    IndivisibleResolution { side: usize, patch: usize },
    #[error("manifest missing: {0}")]
    ManifestMissing(PathBuf),
    #[error("corrupt tensor file {path}: {reason}")]
    CorruptTensorFile { path: PathBuf, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown key: {0}")]
    UnknownKey(String),
    #[error("empty category name")]
    EmptyCategory,
    #[error("duplicate category: {0}")]
    DuplicateCategory(String),

    #[error("decoder stages do not match patch size: {0}")]
    StageMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("fold index {0} not in 0..4")]
    BadFoldIndex(usize),
    #[error("bad category universe: {0}")]
    BadUniverse(String),
    #[error("label {0} outside category range")]
    UnknownLabel(usize),
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("empty dataset")]
    EmptyDataset,
    #[error("test-fold category {0:?} found in training stream")]
    LeakedTestCategory(String),
    #[error("loss diverged at step {step}")]
    DivergedLoss { step: usize },
    #[error("category mismatch: {0}")]
    CategoryMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end:
    /// 2 config error, 3 data error, 4 numerical divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadConfig(_) | Error::ConfigMismatch(_) | Error::StageMismatch(_) | Error::NonPositiveTau(_) => 2,
            Error::DivergedLoss { .. } | Error::NonFinite(_) => 4,
            Error::ManifestMissing(_)
            | Error::CorruptTensorFile { .. }
            | Error::DimensionMismatch(_)
            | Error::UnknownKey(_)
            | Error::EmptyDataset
            | Error::LeakedTestCategory(_)
            | Error::CategoryMismatch(_)
            | Error::UnknownLabel(_)
            | Error::EmptyEvaluation
            | Error::BadUniverse(_)
            | Error::BadFoldIndex(_)
            | Error::IndivisibleResolution { .. }
            | Error::Io { .. }
            | Error::Json(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
