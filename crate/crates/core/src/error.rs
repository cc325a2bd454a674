use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ScdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ScdError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("non-finite {component} loss ({value})")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing pair member for stem `{stem}`: {path}")]
    MissingPairMember { stem: String, path: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("png error: {0}")]
    Png(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ScdError {
    /// Validation failures (bad input, bad config) as opposed to runtime
    /// failures; the CLI maps the former to exit code 1 and the latter to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ScdError::Shape(_)
                | ScdError::InvalidArgument(_)
                | ScdError::ClassOutOfRange { .. }
                | ScdError::Dataset(_)
                | ScdError::MissingPairMember { .. }
                | ScdError::Config(_)
        )
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ScdError::Shape(msg.into()))
}
