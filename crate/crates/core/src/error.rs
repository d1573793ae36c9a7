use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("rate mismatch: audio is {actual} Hz, frontend expects {expected} Hz")]
    RateMismatch { expected: u32, actual: u32 },

    #[error("segment too short: {frames} frames available, {required} required")]
    SegmentTooShort { frames: usize, required: usize },

    #[error("{bound} out of range: {value} s (audio duration {duration} s)")]
    OutOfRange {
        bound: &'static str,
        value: f64,
        duration: f64,
    },

    #[error("empty segment: start {start} s, end {end} s")]
    EmptySegment { start: f64, end: f64 },

    #[error("unknown phone symbol {0:?}")]
    UnknownPhone(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("vocabulary too small: {size} words, at least {min} required")]
    VocabTooSmall { size: usize, min: usize },

    #[error("shape mismatch in {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("alignment impossible: {frames} frames cannot carry {labels} labels (minimum {required})")]
    AlignmentImpossible {
        frames: usize,
        labels: usize,
        required: usize,
    },

    #[error("invalid label sequence: {0}")]
    InvalidLabels(String),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (last good step {last_good})")]
    Diverged { step: u64, last_good: u64 },

    #[error("holdout discriminative accuracy {accuracy:.4} below floor {floor:.4}")]
    BelowAccuracyFloor { accuracy: f64, floor: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("no positive examples to calibrate on")]
    NoPositives,

    #[error("deferred late-score evaluation failed: {0}")]
    DeferredEvaluation(Box<Error>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for failures caused by NaN/inf values during numeric work.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::Diverged { .. }
        )
    }
}
