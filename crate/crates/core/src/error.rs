use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid OWA weights: {0}")]
    InvalidWeights(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("input too large for exhaustive enumeration: {size} > {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid group assignment: {0}")]
    InvalidGroups(String),

    #[error("no precomputed target for query {qid} at lambda {lambda}")]
    MissingTarget { qid: String, lambda: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unsupported {kind} version {found} (expected {expected})")]
    UnsupportedVersion {
        kind: String,
        found: u32,
        expected: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
