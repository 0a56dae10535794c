use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps [`Error::Config`]-like variants to exit code 2 and data
/// problems to exit code 3, see [`Error::is_config`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter store `{0}` is frozen")]
    Frozen(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for errors caused by an invalid configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape { .. } | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
