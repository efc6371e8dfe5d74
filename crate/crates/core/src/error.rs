use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad bundle format: {0}")]
    Format(String),

    #[error("bundle data corrupted at tensor `{tensor}`: {reason}")]
    Corrupt { tensor: String, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("tokenizer data error: {0}")]
    Tokenizer(String),

    #[error("region error: {0}")]
    Region(String),

    #[error("invalid box coordinates: {0}")]
    Coordinate(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("score map of {h}x{w} exceeds the brute-force limit of {limit}x{limit}; use ess or hierarchical search")]
    SizeGuard { h: usize, w: usize, limit: usize },

    #[error("architecture error: {0}")]
    Arch(String),

    #[error("dataset parse error: {0}")]
    Dataset(String),

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
