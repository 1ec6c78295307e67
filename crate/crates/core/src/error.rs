use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: index {index} out of range for size {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: graph was built without gradient tracking")]
    NotRecorded,

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error(
        "non-finite loss at iteration {iter} (lr {lr:e}, grad norm {grad_norm:e})"
    )]
    Diverged { iter: u64, lr: f64, grad_norm: f64 },

    #[error("invalid config: `{field}` {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error("character {ch:?} is not in the vocabulary")]
    UnknownChar { ch: char },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("{path}: {reason}")]
    RunDir { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
