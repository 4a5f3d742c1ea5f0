use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unsupported WAV layout in {path}: {reason}")]
    WavLayout { path: PathBuf, reason: String },
    #[error("insufficient speaker pool: need {needed} speakers, have {available}")]
    InsufficientPool { needed: usize, available: usize },
    #[error("mixture too short: {actual_s:.3} s < {needed_s:.3} s")]
    TooShort { needed_s: f64, actual_s: f64 },
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
    #[error("no voiced frames")]
    NoVoicedFrames,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate mean: embeddings cancel to the zero vector")]
    DegenerateMean,
    #[error("overlapping segments: {0}")]
    OverlappingSegments(String),
    #[error("stale forward trace: {0}")]
    StaleTrace(String),
    #[error("loss became non-finite at step {step}: {detail}")]
    NanLoss { step: usize, detail: String },
    #[error("no speakers detected")]
    NoSpeakers,
    #[error("undefined DER: reference has no scored speech")]
    UndefinedDer,
    #[error("all-zero reference signal")]
    ZeroReference,
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
