use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration supplied by the user.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("failed to load weights from {source_name}: missing keys [{}]", missing.join(", "))]
    MissingWeights {
        source_name: String,
        missing: Vec<String>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True when the failure is caused by user input (bad config, missing
    /// files) rather than by an internal fault.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingWeights { .. }
                | Error::Dataset(_)
                | Error::Image { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
