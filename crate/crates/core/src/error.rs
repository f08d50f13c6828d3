//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("column {col} has norm {norm:.3e}, below the {floor:.1e} floor (degenerate embedding)")]
    DegenerateColumn { col: usize, norm: f64, floor: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{what}: rejection sampling exceeded {attempts} attempts (parameters infeasible)")]
    Infeasible { what: String, attempts: usize },

    #[error("instance set is empty")]
    EmptySet,

    #[error("training aborted: non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),

    #[error("snapshot encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}
