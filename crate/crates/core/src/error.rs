use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("optimizer state: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-stationary Hawkes process: alpha/decay = {ratio} >= 1")]
    Stationarity { ratio: f64 },

    #[error("no inter-event intervals: every sequence has a single event")]
    NoIntervals,

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged in epoch {epoch}: {message}")]
    Diverged {
        epoch: usize,
        message: String,
        /// Best parameters seen before the failure.
        last_good: Box<crate::model::Checkpoint>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
