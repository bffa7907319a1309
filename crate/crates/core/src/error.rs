use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: shape mismatches, bad indices, inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problems with the data itself (empty sets, labels out of range, short classes).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file contents.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Violated internal contract (length mismatches between aligned buffers).
    #[error("internal error: {0}")]
    Internal(String),

    /// Two representations that cannot be compared.
    #[error("comparison error: {0}")]
    Comparison(String),

    /// An input broke an operation's precondition (e.g. negative values in a ReLU map).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Name of the failing stage, if the error was tagged.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Extension to tag results with a stage name.
pub trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
