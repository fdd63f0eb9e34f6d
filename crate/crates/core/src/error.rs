use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("scene script `{id}` rejected: {reason}")]
    Script { id: String, reason: String },

    #[error("duplicate script id `{0}` in bank input")]
    DuplicateScript(String),

    #[error(
        "no retrieval candidate passes the identity threshold for subject {subject} of `{script}`"
    )]
    InsufficientCandidates { script: String, subject: usize },

    #[error("prompt mentions `{0}` but no reference matches it")]
    UnboundSubject(String),

    #[error("caption parse error at token {position}: {message}")]
    CaptionParse { position: usize, message: String },

    #[error("unknown LoRA target `{0}`")]
    UnknownTarget(String),

    #[error("adapter target sets differ: {0}")]
    TargetMismatch(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("training diverged: loss stayed above {threshold} for {steps} consecutive steps (iteration {iteration})")]
    Diverged {
        iteration: usize,
        threshold: f64,
        steps: usize,
    },

    #[error("no preference pair survived curation ({candidates} candidates)")]
    EmptyAfterCuration { candidates: usize },

    #[error("stage `{stage}` requires `{missing}` which has not been run")]
    MissingDependency { stage: String, missing: String },

    #[error("{path}:{line}: {message}")]
    ConfigParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),

    #[error("bad tensor file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
