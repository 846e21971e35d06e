use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid language: {0}")]
    InvalidLanguage(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("arrival pattern is not generated by any word of the language (step {step})")]
    PatternOutsideLanguage { step: usize },

    #[error("measurement from time {0} was already ingested")]
    DuplicateArrival(usize),

    #[error("invalid arrival: {0}")]
    InvalidArrival(String),

    #[error("estimator already reached the end of the horizon (T = {0})")]
    StepBeyondHorizon(usize),

    #[error("sequences {first} and {second} share a prefix node but disagree on availability at step {step}")]
    ConflictingZeroPattern {
        step: usize,
        first: usize,
        second: usize,
    },

    #[error("no recovery level in the search range admits a feasible design")]
    AllInfeasible { table: Vec<GridPoint> },

    #[error("{kind} fingerprint mismatch: certificate has {expected}, supplied data hashes to {actual}")]
    FingerprintMismatch {
        kind: &'static str,
        expected: String,
        actual: String,
    },

    #[error("certificate rejected: {0}")]
    CertificateRejected(String),

    #[error("input sequence has length {got}, expected {expected}")]
    InputLength { expected: usize, got: usize },

    #[error("lp solver failure: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One evaluated point of the recovery-level line search.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridPoint {
    pub mu1: f64,
    /// `None` when the program at this level was infeasible or failed.
    pub objective: Option<f64>,
    pub status: String,
}
