use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("length mismatch in `{field}`: expected {expected}, found {found}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("distribution at index {index} is not normalized (sum = {sum})")]
    NonNormalizedDistribution { index: usize, sum: f64 },

    #[error("negative entropy {value} at index {index}")]
    NegativeEntropy { index: usize, value: f64 },

    #[error("invalid probability vector: {reason}")]
    InvalidDistribution { reason: String },

    #[error("empty span: start {start} >= end {end}")]
    EmptySpan { start: usize, end: usize },

    #[error("process score {score} at segment {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, score: f64 },

    #[error("rollout group of size {size} is too small (need at least 2)")]
    GroupTooSmall { size: usize },

    #[error("process score list is empty")]
    EmptyScores,

    #[error("trajectory {index} has no process scores")]
    MissingProcessScores { index: usize },

    #[error("trajectory {index}: {scores} scores for {segments} segments")]
    ScoreCountMismatch {
        index: usize,
        scores: usize,
        segments: usize,
    },

    #[error("advantage vector has length {found}, generated span has {expected}")]
    MisalignedAdvantage { expected: usize, found: usize },

    #[error("invalid segment set: {0}")]
    InvalidSegments(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
