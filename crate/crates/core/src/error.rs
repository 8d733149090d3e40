use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing modality '{modality}' for patient '{patient}'")]
    MissingModality { patient: String, modality: String },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("{what} format version {found} is not supported (this build reads version {expected}); upgrade required")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::NonFinite(_) => "non_finite",
            Error::Backward(_) => "backward",
            Error::Invalid(_) => "invalid_input",
            Error::Diverged(_) => "diverged",
            Error::MissingModality { .. } => "missing_modality",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }

    /// True when the failure is caused by the caller's inputs rather than a
    /// fault inside the pipeline.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Diverged(_) | Error::Backward(_) | Error::NonFinite(_)
        )
    }
}
