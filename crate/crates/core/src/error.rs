use std::path::PathBuf;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape for {what}: expected {expected}, got {got:?}")]
    InvalidShape {
        what: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("timestep {t} outside {range}")]
    TimestepOutOfRange { t: f64, range: &'static str },

    #[error("score singular at t→0 (t = {t}, t_min = {t_min})")]
    ScoreSingular { t: f64, t_min: f64 },

    #[error("distilled timesteps must satisfy 1 ≥ t1 > t2 > … > 0, got {0:?}")]
    NonDescendingTimesteps(Vec<f64>),

    #[error("non-finite values in {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite {loss} at step {step} (batch {batch_id})")]
    NonFiniteLoss {
        step: u64,
        loss: &'static str,
        batch_id: u64,
    },

    #[error("teacher parameters changed by step {step}")]
    TeacherModified { step: u64 },

    #[error("window [{start}, {start}+{len}) out of range for {chunks} chunks")]
    WindowOutOfRange {
        start: usize,
        len: usize,
        chunks: usize,
    },

    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown degradation mode `{0}`")]
    UnknownDegradation(String),

    #[error("sprite radius {radius} does not fit in a {height}x{width} frame")]
    SpriteTooLarge {
        radius: f64,
        height: usize,
        width: usize,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::NonDescendingTimesteps(_)
                | Error::UnknownDegradation(_)
                | Error::SpriteTooLarge { .. }
                | Error::Incompatible(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
