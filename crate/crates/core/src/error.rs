use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("singular system (condition estimate {condition:.3e})")]
    SingularSystem { condition: f64 },

    #[error("backward requires a 1x1 output, got {0:?}")]
    NotScalar((usize, usize)),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sensitive group {0} has no members")]
    MissingGroup(usize),

    #[error("anchor subgroup (y={y}, a={a}) is empty")]
    MissingSubgroup { y: u8, a: usize },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(&'static str),

    #[error("inconsistent architecture: {0}")]
    Architecture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
