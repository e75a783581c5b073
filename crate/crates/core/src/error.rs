use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("invalid temperature {0}: must be finite and > 0")]
    InvalidTemperature(f64),

    #[error("finite-difference oracle produced a non-finite value at coordinate {coord}")]
    OracleEvaluation { coord: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} is not unit-norm (norm = {norm})")]
    Normalization { row: usize, norm: f64 },

    #[error("probability column {column} sums to {sum}, expected 1")]
    Probability { column: usize, sum: f64 },

    #[error("forward tape is stale: encoder was modified after the forward pass")]
    StaleTape,

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("schedule step {step} exceeds total {total}")]
    Schedule { step: usize, total: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
