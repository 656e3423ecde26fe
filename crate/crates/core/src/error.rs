use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor `{name}`: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor name sets differ: only in left {only_left:?}, only in right {only_right:?}")]
    NameMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },

    #[error("tensor `{name}`: shape {shape:?} needs {expected} values, got {got}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("tensor `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("delta set was computed against `{found}`, expected base `{expected}`")]
    BaseMismatch { expected: String, found: String },

    #[error("interpolation coefficient {0} outside the allowed interval")]
    LambdaOutOfRange(f64),

    #[error("Beta shape parameter must be positive and finite, got {0}")]
    InvalidAlpha(f64),

    #[error("density argument {0} outside (0, 1)")]
    PdfDomain(f64),

    #[error("sweep schedule has no alphas")]
    EmptySchedule,

    #[error("drop rate must lie in [0, 1), got {0}")]
    InvalidDropRate(f64),

    #[error("retain ratio must lie in (0, 1], got {0}")]
    InvalidRetainRatio(f64),

    #[error("invalid recipe: {0}")]
    Recipe(String),

    #[error("checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensors `{first}` and `{second}` have overlapping byte ranges")]
    OffsetOverlap { first: String, second: String },

    #[error("payload has uncovered bytes [{begin}, {end})")]
    OffsetGap { begin: u64, end: u64 },

    #[error("tensor `{name}`: byte range holds {bytes} bytes, shape {shape:?} needs {expected}")]
    ByteSizeMismatch {
        name: String,
        shape: Vec<usize>,
        bytes: u64,
        expected: u64,
    },

    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("manifest schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("toy training diverged (non-finite loss) for seed {seed}")]
    Diverged { seed: u64 },

    #[error("PDR undefined: metric without attack is {0}")]
    PdrUndefined(f64),

    #[error("invalid metric value {0}")]
    InvalidMetric(f64),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
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
