use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

pub type Result<T, E = CtrlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CtrlError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error{}: {msg}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Data { row: Option<usize>, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("schema hash mismatch: checkpoint {stored}, data {given}")]
    SchemaMismatch { stored: String, given: String },
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?} in checkpoint, model expects {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

impl CtrlError {
    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data {
            row: None,
            msg: msg.into(),
        }
    }

    pub fn at_row(row: usize, msg: impl Into<String>) -> Self {
        Self::Data {
            row: Some(row),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Tensor(_) | Self::Diverged { .. } | Self::Metric(_) => 3,
            Self::Io { .. }
            | Self::Data { .. }
            | Self::Schema(_)
            | Self::Prompt(_)
            | Self::Checkpoint(_)
            | Self::Json(_) => 2,
        }
    }
}
