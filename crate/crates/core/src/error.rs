use std::path::PathBuf;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing artifact {0} (run the stage that produces it first)")]
    MissingArtifact(PathBuf),

    #[error("{what} diverged at epoch {epoch}: loss = {loss}")]
    Diverged {
        what: &'static str,
        epoch: usize,
        loss: f64,
    },

    #[error("non-finite sampler state at step {step}")]
    NonFinite { step: usize },

    #[error("speech not decodable: {0}")]
    Undecodable(String),

    #[error("average precision undefined: no positive labels")]
    NoPositives,

    #[error("quality gate failed: {0}")]
    Gate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
