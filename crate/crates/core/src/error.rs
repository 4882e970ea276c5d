use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while ingesting or validating survey data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed row: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("header does not match the dataset schema (expected `{expected}`, found `{found}`)")]
    Header { expected: String, found: String },
    #[error("line {line}: unknown study year {year}")]
    UnknownStudyYear { line: u64, year: i64 },
    #[error("record {id}: {rule}")]
    Invariant { id: u64, rule: String },
    #[error("duplicate record id {0}")]
    DuplicateId(u64),
    #[error("smoking assignment missing for record {0}")]
    MissingAssignment(u64),
    #[error("record {id}: missing region outside study years 1972/1977")]
    RegionNotImputable { id: u64 },
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },
}

/// Errors raised by model evaluation and fitting.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("age bin {0} outside the hazard grid 25..=100")]
    AgeOutOfGrid(i64),
    #[error("cell (g={gender}, y={smoking}, t={age}) has {events} events but zero exposure")]
    ImpossibleExposure {
        gender: usize,
        smoking: usize,
        age: i64,
        events: u64,
    },
    #[error("full conditional requested for participant {0}")]
    Participant(u64),
    #[error("record {0} has a missing region; impute regions before fitting")]
    MissingRegion(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("chain {chain} failed: {reason}")]
    Chain { chain: usize, reason: String },
    #[error("empty truncation interval [{lower}, {upper}]")]
    EmptyInterval { lower: f64, upper: f64 },
}

/// Errors from the diagnostics and estimator layers.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {min} chains, found {found}")]
    TooFewChains { min: usize, found: usize },
    #[error("chains must have equal length >= {min}")]
    ChainLength { min: usize },
    #[error("cell {0} missing")]
    MissingCell(String),
    #[error("trend tables do not cover the same cells")]
    CellMismatch,
    #[error("invalid argument: {0}")]
    Invalid(String),
}
