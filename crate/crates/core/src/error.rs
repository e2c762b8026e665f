use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GmnError>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by [`ErrorKind`] so callers (the CLI in particular)
/// can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum GmnError {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("cannot split identities with a single record: {identities:?}")]
    Split { identities: Vec<u32> },

    #[error("ingestion error at row {row}: {reason}")]
    Ingest { row: usize, reason: String },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("training aborted at epoch {epoch}, iteration {iteration}: {source}")]
    Training {
        epoch: usize,
        iteration: usize,
        #[source]
        source: Box<GmnError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

impl GmnError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        GmnError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        GmnError::Shape {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GmnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            GmnError::Config { .. } => ErrorKind::Config,
            GmnError::Numeric(_) => ErrorKind::Numeric,
            GmnError::Io { .. } => ErrorKind::Io,
            GmnError::Training { source, .. } => source.kind(),
            GmnError::Shape { .. }
            | GmnError::Sampling(_)
            | GmnError::Split { .. }
            | GmnError::Ingest { .. }
            | GmnError::State(_)
            | GmnError::Corrupt(_)
            | GmnError::Version { .. }
            | GmnError::Eval(_) => ErrorKind::Data,
        }
    }
}

/// Rejects NaN and infinities.
pub(crate) fn ensure_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(GmnError::Numeric(what.to_string()))
    }
}
