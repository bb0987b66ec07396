use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PamError>;

#[derive(Debug, Error)]
pub enum PamError {
    /// A configuration value violates one of its invariants.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A kernel met a value it cannot process (zero norm, NaN, infinity).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("unknown state id {0}")]
    UnknownState(usize),

    #[error("invalid {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("refusing to overwrite existing {0} (pass --force)")]
    Exists(PathBuf),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl PamError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        PamError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PamError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PamError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PamError::Config { .. } | PamError::Exists(_) => 2,
            PamError::Numerical(_) | PamError::Training { .. } => 3,
            _ => 1,
        }
    }
}
