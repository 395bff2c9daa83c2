use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("schema mismatch: column `{column}` {detail}")]
    SchemaMismatch { column: String, detail: String },

    #[error("domain violation in column `{column}` at row {row}: {detail}")]
    DomainViolation {
        column: String,
        row: usize,
        detail: String,
    },

    #[error("dataset has no rows")]
    EmptyDataset,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("too few units: need {needed}, have {available}")]
    TooFewUnits { needed: usize, available: usize },

    #[error("invalid truncation bounds [{lower}, {upper}]")]
    InvalidBounds { lower: f64, upper: f64 },

    #[error("positivity collapse: {0}")]
    PositivityCollapse(String),

    #[error("no measured outcomes{}", .cluster.as_ref().map(|c| format!(" in cluster `{c}`")).unwrap_or_default())]
    NoMeasuredOutcomes { cluster: Option<String> },

    #[error("non-monotone censoring for subject `{subject}`")]
    NonMonotoneCensoring { subject: String },

    #[error("empty risk set at time {time}")]
    EmptyRiskSet { time: usize },

    #[error("treatment arm {arm} has no clusters")]
    DegenerateArm { arm: u8 },

    #[error("control-arm mean is zero; ratio undefined")]
    ZeroDenominator,

    #[error("too few clusters: need {needed}, have {available}")]
    TooFewClusters { needed: usize, available: usize },

    #[error("invalid missingness mechanism: {0}")]
    InvalidMechanism(String),

    #[error("estimator `{estimator}` has {available} successful iterations; need at least 2")]
    TooFewIterations { estimator: String, available: usize },

    #[error("no candidates to select from")]
    EmptyCandidateSet,

    #[error("bootstrap failed: {failed} of {total} replicates failed")]
    BootstrapFailed { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Configuration and input-data errors abort a study; everything else is
    /// recorded against a single (candidate, iteration) cell.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::FileNotFound(_)
                | Error::SchemaMismatch { .. }
                | Error::DomainViolation { .. }
                | Error::Config(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
