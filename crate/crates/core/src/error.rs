use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("inconsistent table: {0}")]
    Consistency(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stratum `{stratum}` holds {available} inputs, {requested} requested")]
    InsufficientPool {
        stratum: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("sequence lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("compound distance needs at least one delegate")]
    EmptyDelegateSet,

    #[error("accuracies A={a} B={b} admit no joint distribution")]
    InfeasibleAccuracies { a: f64, b: f64 },

    #[error("bound only holds for A+B>1 (got A={a}, B={b})")]
    OutOfRegime { a: f64, b: f64 },

    #[error("black-box output {0:?} matches no candidate model")]
    OracleOutputInvalid(Vec<u32>),

    #[error("query budget exhausted after {queries_used} queries")]
    BudgetExhausted { queries_used: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("{got} negative pairs supplied, calibration needs at least {needed}")]
    TooFewNegatives { got: usize, needed: usize },

    #[error("every observed sequence is constant; the distances carry no evidence")]
    DegenerateEvidence,

    #[error("variant accuracy {variant:.4} does not exceed (1-{eta})*{parent:.4}")]
    AccuracyGateViolation {
        variant: f64,
        parent: f64,
        eta: f64,
    },

    #[error("ground truth missing for input `{0}`")]
    MissingGroundTruth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
