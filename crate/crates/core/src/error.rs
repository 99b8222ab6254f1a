//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("enumeration bound exceeded: {units} units, limit {bound}")]
    EnumerationBound { units: usize, bound: usize },
    #[error("invalid annealing schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("support mismatch: p has {0} entries, q has {1}")]
    SupportMismatch(usize, usize),
    #[error("covariance matrix is not symmetric")]
    NotSymmetric,
    #[error("covariance eigenvalue {0} below tolerance")]
    NegativeEigenvalue(f64),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
