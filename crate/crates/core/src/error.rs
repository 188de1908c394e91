use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no iris found in segmentation mask")]
    NoIrisFound,

    #[error("no circle found by the Hough transform")]
    NoCircleFound,

    #[error("invalid eye geometry: {0}")]
    Geometry(String),

    #[error("codes share no jointly valid bits")]
    IncomparableCodes,

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Validation(_) => "validation",
            Error::NoIrisFound => "no_iris_found",
            Error::NoCircleFound => "no_circle_found",
            Error::Geometry(_) => "geometry",
            Error::IncomparableCodes => "incomparable_codes",
            Error::Training { .. } => "training",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }

    /// Whether this error is a failure of a pipeline stage rather than bad input data.
    pub fn is_pipeline_failure(&self) -> bool {
        matches!(
            self,
            Error::NoIrisFound
                | Error::NoCircleFound
                | Error::Geometry(_)
                | Error::IncomparableCodes
                | Error::Training { .. }
        )
    }
}
