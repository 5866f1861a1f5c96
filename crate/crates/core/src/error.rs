use std::path::PathBuf;

use thiserror::Error;

use crate::cmdp::Violation;

pub type Result<T, E = CapsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CapsError {
    #[error("invalid CMDP: {}", format_violations(.0))]
    InvalidCmdp(Vec<Violation>),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("index out of range: {what} = {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("policy returned action {action} at state {state}, t = {t} (n_actions = {n_actions})")]
    ActionOutOfRange {
        state: usize,
        t: usize,
        action: usize,
        n_actions: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed dataset header: {0}")]
    MalformedHeader(String),

    #[error("line {line}: expected {expected} fields, found {found}")]
    RowArity {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: cost field {value:?} is not a non-negative integer")]
    NonIntegerCost { line: u64, value: String },

    #[error("line {line}: cannot parse field `{field}` from {value:?}")]
    FieldParse {
        line: u64,
        field: &'static str,
        value: String,
    },

    #[error("dataset does not match environment: {0}")]
    Incompatible(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing estimator: {0}")]
    MissingEstimator(String),

    #[error("degenerate normalisation: r_max ({r_max}) must exceed r_min ({r_min})")]
    DegenerateNormalization { r_min: f64, r_max: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CapsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CapsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        CapsError::Json {
            context: context.into(),
            source,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
