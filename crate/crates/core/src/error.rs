use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input file not found: {0}")]
    MissingFile(PathBuf),
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {col}: cannot parse {value:?} as a number")]
    NonNumericCell { line: usize, col: usize, value: String },
    #[error("line {line}, column {col}: value is not finite")]
    NonFiniteValue { line: usize, col: usize },
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("dimension mismatch: {0} vs {1} columns")]
    DimensionMismatch(usize, usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("query point {0} is inactive")]
    InactiveQuery(usize),
    #[error("index has no active points")]
    EmptyIndex,
    #[error("invalid probability {0}: must lie strictly between 0 and 1")]
    InvalidProbability(f64),
    #[error("count {b_obs} out of range for {k} trials")]
    CountOutOfRange { b_obs: usize, k: usize },
    #[error("neighbor sequence is empty")]
    EmptySequence,
    #[error("cohort {0} has no active points")]
    EmptyCohort(&'static str),
    #[error("need at least {min} Monte-Carlo samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("invalid level {0}")]
    InvalidLevel(f64),
    #[error("null tail is empty")]
    EmptyNullTail,
    #[error("candidate point {0} is inactive")]
    InactiveCandidate(usize),
    #[error("pruned set is empty")]
    EmptyPrunedSet,
    #[error("parameter vector contains non-finite values")]
    NonFiniteParameter,
    #[error("batch needs at least 2 points, got {0}")]
    DegenerateBatch(usize),
    #[error("batch contains no query points")]
    NoQueriesInBatch,
    #[error("feature index {index} out of range for {d} features")]
    SubsetOutOfRange { index: usize, d: usize },
    #[error("too few samples per fold: {0}")]
    TooFewSamplesPerFold(String),
    #[error("injected id set is empty")]
    EmptyInjectedSet,
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("invalid benchmark specification: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
