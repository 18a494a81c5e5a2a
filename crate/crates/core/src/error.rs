use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate feature: zero-norm vector")]
    DegenerateFeature,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("k = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("silhouette needs at least 2 non-empty clusters, got {0}")]
    TooFewClusters(usize),
    #[error("no feasible candidate for the target class count (N = {0})")]
    NoFeasibleCandidate(usize),
    #[error("batch too small for negative mining: batch {batch}, pairs {pairs}")]
    BatchTooSmall { batch: usize, pairs: usize },
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("missing forward cache: {0}")]
    MissingCache(String),
    #[error("H-score undefined: {0}")]
    HScoreUndefined(String),
    #[error("regime rule violated: {0}")]
    Regime(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
