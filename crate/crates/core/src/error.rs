use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),

    #[error("payload size mismatch: header declares {expected_rows} rows x {dim} dims, file holds {actual_values} values")]
    PayloadMismatch {
        expected_rows: usize,
        dim: usize,
        actual_values: usize,
    },

    #[error("non-finite value in row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("record count mismatch: matrix has {matrix} rows, manifest has {manifest} records")]
    CountMismatch { matrix: usize, manifest: usize },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("unknown {attribute} label {label:?} for dataset {dataset}")]
    UnknownLabel {
        attribute: &'static str,
        label: String,
        dataset: String,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("group {0:?} is empty")]
    EmptyGroup(String),

    #[error("need at least 2 groups, found {0}")]
    TooFewGroups(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("prompt set {0:?} has no embedded prompts")]
    MissingPromptSet(String),

    #[error("attribute matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("row {row} projects to norm {norm:e}; it lies in the removed subspace")]
    AnnihilatedRow { row: usize, norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("statistic undefined on the observed data")]
    UndefinedStatistic,

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
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

    pub(crate) fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True when the failure comes from the audit configuration rather than the data it points at.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
