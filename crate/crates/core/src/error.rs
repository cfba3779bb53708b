use thiserror::Error;

/// Errors raised anywhere in the training and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: non-finite value produced or supplied")]
    NonFinite { op: &'static str },
    #[error("column {col} has zero norm and cannot be normalized")]
    ZeroColumn { col: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "exp(score / epsilon) overflows (max |score| = {max_abs}, epsilon = {epsilon}); \
         scores must be cosine similarities in [-1, 1] from unit-norm features and prototypes"
    )]
    ScoreOverflow { max_abs: f64, epsilon: f64 },
    #[error("assignment column {col} sums to {sum}, expected 1")]
    TargetNotNormalized { col: usize, sum: f64 },
    #[error("negative entry {value} in assignment matrix")]
    NegativeEntry { value: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training state is missing {0}")]
    Uninitialized(&'static str),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("declared dimensions overflow: {0}")]
    DimOverflow(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
