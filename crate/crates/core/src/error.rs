use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed NIfTI file: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("grid mismatch between {left} and {right}")]
    GridMismatch { left: String, right: String },
    #[error("crop box out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("label code {0} has no entry in the mapping")]
    UnmappedLabel(u32),
    #[error("scheme mismatch: {0} vs {1}")]
    SchemeMismatch(String, String),
    #[error("ground truth contains no labeled voxels")]
    EmptyGroundTruth,
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Format(_) | Error::MissingInput(_) => ErrorKind::Io,
            Error::Numerical(_) | Error::Degenerate(_) => ErrorKind::Numerical,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }
}
