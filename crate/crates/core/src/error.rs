use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("format mismatch: {malformed} of {total} lines malformed (first: line {first_line}: {first_text:?})")]
    FormatMismatch {
        malformed: usize,
        total: usize,
        first_line: usize,
        first_text: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("action space exhausted")]
    ActionSpaceExhausted,

    #[error("user filter rejected {0} consecutive samples")]
    RetriesExhausted(usize),

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
