use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: series has {got} steps but the operation needs at least {needed}")]
    EmptyInput { needed: usize, got: usize },

    #[error("degenerate dimension {index} ({name}): zero variance")]
    DegenerateDimension { index: usize, name: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("trajectory instability at step {step}: value {value}")]
    Instability { step: usize, value: f64 },

    #[error("anomaly placement failed: {0}")]
    Placement(String),

    #[error("insufficient history: step {t} needs at least {k} past steps")]
    InsufficientHistory { t: usize, k: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("too few calibration scores: need {needed}, got {got}")]
    TooFewScores { needed: usize, got: usize },

    #[error("detection metrics undefined: {0}")]
    DegenerateLabels(String),

    #[error("metric denominator is zero: {0}")]
    ZeroDenominator(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
