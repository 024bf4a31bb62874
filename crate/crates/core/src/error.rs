use std::path::PathBuf;

use crate::types::{ClassLabel, ConceptId, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("zero-norm vector has no direction")]
    ZeroVector,

    #[error("non-finite value in embedding")]
    NonFinite,

    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("degenerate competing-class similarity for class {0}")]
    DegenerateCompetingSimilarity(ClassLabel),

    #[error("degenerate candidate pool for class {0}")]
    DegenerateCandidatePool(ClassLabel),

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("empty vocabulary: no concept survives lambda {0}")]
    EmptyVocabulary(f64),

    #[error("unseedable concept {0}: no source image carries a reliable box for it")]
    UnseedableConcept(ConceptId),

    #[error("unknown concept {0}")]
    UnknownConcept(ConceptId),

    #[error("invalid concept catalog: {0}")]
    InvalidCatalog(String),

    #[error("unknown class {0}")]
    UnknownClass(ClassLabel),

    #[error("class {0} absent from the evaluation set")]
    ClassAbsent(ClassLabel),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("objective diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("dataset validation failed with {} violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("sample generator failed: {0}")]
    Generator(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::ZeroVector
            | Error::NonFinite
            | Error::DegenerateCompetingSimilarity(_)
            | Error::DegenerateCandidatePool(_)
            | Error::Divergence { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
