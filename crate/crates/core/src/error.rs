use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid segment [{start}, {end}]: start must not exceed end")]
    InvalidSegment { start: f64, end: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target-domain labels were read during training")]
    FirewallViolation,

    #[error("stage `{stage}` has not been run: missing {path}")]
    MissingDependency { stage: String, path: PathBuf },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Json(_) => 2,
            Error::MissingDependency { .. } => 3,
            Error::Invariant(_) | Error::FirewallViolation => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
