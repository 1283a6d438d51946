use std::path::PathBuf;

/// Errors raised across the toolkit.
///
/// Variants are grouped so the CLI can map each one onto a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("mismatched rates: {0}")]
    MismatchedRates(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss} ({context})")]
    Divergence {
        step: usize,
        loss: f64,
        context: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("model has not been trained: {0}")]
    Untrained(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Self::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Short category name, also used to pick the CLI exit status.
    pub fn category(&self) -> &'static str {
        match self {
            Self::InvalidInput(_) | Self::ShapeMismatch { .. } | Self::MismatchedRates(_) => {
                "input"
            }
            Self::NonFinite(_) | Self::Divergence { .. } => "numeric",
            Self::Config(_) => "config",
            Self::Dataset(_) | Self::Checksum { .. } => "dataset",
            Self::Checkpoint(_) | Self::Untrained(_) => "model",
            Self::Protocol(_) => "protocol",
            Self::Io { .. } | Self::Serde(_) => "io",
            Self::Tensor(_) => "tensor",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "input" => 2,
            "config" => 3,
            "dataset" => 4,
            "model" => 5,
            "protocol" => 6,
            "numeric" => 7,
            "io" => 8,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
