use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes. The command-line tool maps each class to its own
/// exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Input,
    Model,
    Sampling,
    Artifact,
    Locked,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("delimited text error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("required column `{column}` (configured as `{header}`) not found in header")]
    MissingColumn { column: String, header: String },

    #[error("{rejected} of {total} rows rejected (more than half); first reasons: {summary}")]
    TooManyRejects {
        rejected: usize,
        total: usize,
        summary: String,
    },

    #[error("column `{0}` has no observed values to impute from")]
    NothingToImpute(String),

    #[error("age {0} does not fall in any configured age bin")]
    AgeOutOfBins(String),

    #[error("no data left after geographic filtering")]
    EmptyAfterFilter,

    #[error("zip codes without a state: {0:?}")]
    UnknownState(Vec<String>),

    #[error("zip codes without usable crosswalk tracts: {0:?}")]
    OrphanZips(Vec<String>),

    #[error("predictor column `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("retained zip codes absent from the population source: {0:?}")]
    MissingPopulation(Vec<String>),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("invalid model spec: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Spec(Vec<crate::model::FieldError>),

    #[error("cell references unknown {factor} level `{level}`")]
    UnknownLevel { factor: String, level: String },

    #[error("non-finite parameter value at index {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("poststratification table does not cover {0}")]
    Coverage(String),

    #[error("{0}")]
    Guard(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Io { .. } => ErrorClass::Io,
            Csv(_) | Json(_) | Config(_) | MissingColumn { .. } | TooManyRejects { .. }
            | NothingToImpute(_) | AgeOutOfBins(_) | EmptyAfterFilter | UnknownState(_)
            | OrphanZips(_) | ZeroVariance(_) | MissingPopulation(_) | Invalid(_) => {
                ErrorClass::Input
            }
            Spec(_) | UnknownLevel { .. } | NonFinite(_) | Dimension(_) | Coverage(_)
            | Guard(_) => ErrorClass::Model,
            Sampling(_) => ErrorClass::Sampling,
            MissingArtifact(_) => ErrorClass::Artifact,
            Locked(_) => ErrorClass::Locked,
        }
    }
}
