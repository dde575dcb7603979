use thiserror::Error;

use crate::diffmap::IterationRecord;
use crate::grid::ObjectGrid;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("infeasible atomic packing: {0}")]
    InfeasiblePacking(String),

    #[error("degenerate denominator: {0}")]
    Degenerate(String),

    #[error("operator is not a projection: {0}")]
    NotProjection(String),

    #[error("inconsistent linearization: {0}")]
    Inconsistent(String),

    /// Non-finite values appeared; carries the last finite iterate.
    #[error("iteration diverged at step {iteration}")]
    Diverged {
        iteration: usize,
        last_finite: Box<ObjectGrid>,
        records: Vec<IterationRecord>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
