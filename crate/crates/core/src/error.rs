use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RamError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("layer `{layer}`: {message}")]
    Layer { layer: String, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<RamError>,
    },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl RamError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RamError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn layer(layer: impl Into<String>, message: impl Into<String>) -> Self {
        RamError::Layer {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub fn shape(op: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        RamError::ShapeMismatch {
            op: op.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Stable machine-readable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            RamError::ShapeMismatch { .. } | RamError::InvalidShape(_) | RamError::Layer { .. } => {
                "shape"
            }
            RamError::Autograd(_) => "autograd",
            RamError::Config(_) => "config",
            RamError::Parse { .. } => "parse",
            RamError::Data(_) => "data",
            RamError::Model(_) => "model",
            RamError::Stage { source, .. } => source.category(),
            RamError::Eval(_) => "eval",
            RamError::Io { .. } => "io",
            RamError::Json(_) => "io",
        }
    }
}
