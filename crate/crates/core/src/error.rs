use std::path::PathBuf;

use crate::model::NerParams;

/// Everything that can go wrong in estimation, prediction and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("optimizer did not converge after {iterations} iterations (last iterate {last:?})")]
    NonConvergence { iterations: usize, last: NerParams },

    #[error("area {0} has no population covariate rows")]
    MissingPopulation(i64),

    #[error("area {0} is not present in the dataset")]
    UnknownArea(i64),

    #[error("area parameter is undefined for this input: {0}")]
    UndefinedValue(String),

    #[error("{dropped} of {requested} bootstrap replicates failed to refit")]
    BootstrapFailure { dropped: usize, requested: usize },

    #[error("leave-one-area-out refit failed for areas {0:?}")]
    Jackknife(Vec<i64>),

    #[error("cannot form a normal-theory interval from MSE value {0}")]
    InvalidMse(f64),

    #[error("zero reference MSE in relative-bias aggregation")]
    ZeroReferenceMse,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the failure is numerical (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Estimation(_)
                | Error::NonConvergence { .. }
                | Error::UndefinedValue(_)
                | Error::BootstrapFailure { .. }
                | Error::Jackknife(_)
                | Error::InvalidMse(_)
                | Error::ZeroReferenceMse
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
