use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    /// A marginal constraint cannot be met: the plan has no mass left on a
    /// slice whose prescribed weight is positive.
    #[error("infeasible marginal constraint on axis {axis} at index {index}")]
    Infeasible { axis: usize, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular integrand: {0}")]
    Singular(String),

    #[error("density row {row}: {reason}")]
    DensityRow { row: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("refinement stopped: {0}")]
    Refinement(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
