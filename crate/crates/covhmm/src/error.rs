//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("observation sequence is empty")]
    EmptySequence,

    #[error("sequence length {got} exceeds the {max}-bin study horizon")]
    SequenceTooLong { got: usize, max: usize },

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariate dimension mismatch: block expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("scaled forward mass underflowed to zero at bin {t}")]
    DegenerateLikelihood { t: usize },

    #[error("weighted logit objective is not finite (bad weights?)")]
    NonFiniteObjective,

    #[error("weighted categorical data is empty or has no positive-weight row")]
    EmptyWeightedData,

    #[error("training set has fewer than 2 sequences")]
    TooFewSequences,

    #[error("training set contains no observed values")]
    AllMissing,

    #[error("patient {patient_id}: {source}")]
    Sequence {
        patient_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("no measurements for patient")]
    NoMeasurements,

    #[error("all measurements fall beyond the study horizon")]
    BeyondHorizon,

    #[error("dataset contains a single class ({0} only)")]
    SingleClass(String),

    #[error("sequence {0} is unlabeled where a label is required")]
    Unlabeled(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("fold {fold} has a single class in its training split")]
    SingleClassFold { fold: usize },

    #[error("csv parse error in {path}: {message}")]
    CsvFormat { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach the offending patient id to an error bubbling out of
    /// per-sequence work.
    pub fn for_patient(self, patient_id: &str) -> Error {
        Error::Sequence {
            patient_id: patient_id.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Error {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
