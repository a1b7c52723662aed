use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty window: no observed entries")]
    EmptyWindow,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state system not positive definite (pivot block {block})")]
    NotPositiveDefinite { block: usize },

    #[error("estimate diverged at cycle {cycle}")]
    Diverged { cycle: usize },

    #[error("dense oracle size guard exceeded: {size} > {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("ragged input: row {row} has {found} cells, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("{0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::Diverged { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
