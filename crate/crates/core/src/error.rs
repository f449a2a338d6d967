use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid edit plan: {0}")]
    InvalidPlan(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("model state error: {0}")]
    State(String),

    #[error("objective mode error: {0}")]
    Mode(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ForgeError {
    /// Stable machine-readable code used by the HTTP layer.
    pub fn code(&self) -> &'static str {
        match self {
            ForgeError::InvalidParameter(_) => "invalid_parameter",
            ForgeError::Shape(_) => "shape_mismatch",
            ForgeError::InvalidPlan(_) => "invalid_plan",
            ForgeError::Config(_) => "configuration",
            ForgeError::Input(_) => "input",
            ForgeError::Precondition(_) => "precondition",
            ForgeError::State(_) => "model_state",
            ForgeError::Mode(_) => "mode",
            ForgeError::Load { .. } => "load",
            ForgeError::Divergence(_) => "divergence",
            ForgeError::Image(_) => "image_codec",
            ForgeError::Json(_) => "json",
            ForgeError::Io(_) => "io",
        }
    }
}
