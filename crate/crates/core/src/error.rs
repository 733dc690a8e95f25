use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed on-disk data. `location` names the task/record or byte offset.
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    /// The objective became non-finite. Carries the objective values recorded
    /// before the failure.
    #[error("numerical failure: {message}")]
    NumericalFailure { message: String, trace: Vec<f64> },

    #[error("degenerate curvature: alpha1 = {0} must be positive")]
    DegenerateCurvature(f64),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}
