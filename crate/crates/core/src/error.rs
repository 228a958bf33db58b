use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: outcome must be 0 or 1, got {value}")]
    InvalidOutcome { line: usize, value: String },

    #[error("line {line}: month must be in 1..=12, got {value}")]
    InvalidMonth { line: usize, value: i64 },

    #[error("line {line}: duplicate record for patient {patient_id}, period {period}, month {month}")]
    DuplicateRecord {
        line: usize,
        patient_id: String,
        period: i32,
        month: u8,
    },

    #[error("line {line}: feature {feature} is not in the declared vocabulary")]
    UnknownFeature { line: usize, feature: String },

    #[error("line {line}: feature {feature} has a non-finite value")]
    NonFiniteFeature { line: usize, feature: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training data contains a single class")]
    SingleClass,

    #[error("metric undefined: restricted set has {n_pos} positives and {n_neg} negatives")]
    UndefinedMetric { n_pos: usize, n_neg: usize },

    #[error("unstable bootstrap: {skipped} of {total} resamples were degenerate")]
    UnstableBootstrap { skipped: usize, total: usize },

    #[error("state space of {states} joint states exceeds the enumeration limit of {limit}")]
    StateSpaceTooLarge { states: u128, limit: u128 },

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model was fit on a different vocabulary")]
    VocabularyMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
