use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op} (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite loss at step {step} ({detail})")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("quantizer error: {0}")]
    Quant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace parse error at line {line}: {detail}")]
    TraceParse { line: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
