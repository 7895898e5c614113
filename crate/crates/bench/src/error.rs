use std::path::PathBuf;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    /// A config file that is not valid JSON or does not fit the schema.
    #[error("{}:{line}:{column}: {message}", path.display())]
    Config { path: PathBuf, line: usize, column: usize, message: String },

    /// A config that parses but makes no sense (empty grid, bad value, ...).
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },

    /// An estimator in an experiment cannot be bound to a model.
    #[error("cannot resolve estimator {estimator}: {message}")]
    Resolution { estimator: String, message: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] slamkn::Error),
}

impl BenchError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        BenchError::Invalid { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::Config { .. } => "config",
            BenchError::Invalid { .. } => "invalid_config",
            BenchError::Resolution { .. } => "resolution",
            BenchError::Io { .. } => "io",
            BenchError::Core(slamkn::Error::Format { .. } | slamkn::Error::Version { .. }) => "format",
            BenchError::Core(slamkn::Error::Training(_)) => "training",
            BenchError::Core(slamkn::Error::Divergence { .. }) => "divergence",
            BenchError::Core(_) => "estimation",
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            BenchError::Config { path, line, column, .. } => {
                v["path"] = json!(path);
                v["line"] = json!(line);
                v["column"] = json!(column);
            }
            BenchError::Invalid { field, .. } => v["field"] = json!(field),
            BenchError::Resolution { estimator, .. } => v["estimator"] = json!(estimator),
            BenchError::Io { path, .. } => v["path"] = json!(path),
            BenchError::Core(_) => {}
        }
        v
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
