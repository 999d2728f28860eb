use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported scaling: {0}")]
    UnsupportedScaling(String),

    #[error("{rule} scaling out of range: {detail}")]
    ScalingOutOfRange { rule: &'static str, detail: String },

    #[error("schedule stage {stage}: {detail}")]
    StageOutOfRange { stage: usize, detail: String },

    #[error("unstable coupled weight decay: eta * lambda = {0} >= 1")]
    UnstableDecay(f64),

    #[error("trajectory diverged at step {step} (t = {time})")]
    Diverged { step: usize, time: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
