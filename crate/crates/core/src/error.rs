use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("interaction log is empty")]
    EmptyLog,

    #[error("every user sequence was filtered out")]
    NoSequences,

    #[error("sequence of length {got} is too short, need at least {needed}")]
    TooShort { needed: usize, got: usize },

    #[error("item index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("forward pass is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("vocabulary hash mismatch: checkpoint has {checkpoint}, corpus has {corpus}")]
    VocabMismatch { checkpoint: String, corpus: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("ranking is empty")]
    EmptyRanking,

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
}

impl Error {
    /// Stable snake-case tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::EmptyLog => "empty_log",
            Error::NoSequences => "no_sequences",
            Error::TooShort { .. } => "too_short",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::NonDeterministic { .. } => "non_deterministic",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyRanking => "empty_ranking",
            Error::MissingArtifact(_) => "missing_artifact",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
