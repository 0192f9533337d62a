use std::path::PathBuf;

/// Unified error type for the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("rasters are not aligned: {0}")]
    Alignment(String),

    #[error("incomplete tile set: {0}")]
    Incomplete(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Unsupported(_) => "unsupported",
            Error::Io { .. } => "io",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Validation(_) => "validation",
            Error::Alignment(_) => "alignment",
            Error::Incomplete(_) => "incomplete",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::DegenerateCorpus(_) => "degenerate_corpus",
            Error::EmptyBatch => "empty_batch",
            Error::EmptyEvaluation(_) => "empty_evaluation",
            Error::Undefined(_) => "undefined",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
