use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("target projections not present in model: {}", .0.join(", "))]
    MissingTargets(Vec<String>),

    #[error("model is already adapted; refusing to inject adapters twice")]
    AlreadyAdapted,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(
        "non-finite loss at step {step} (lr={lr:e}, seg={seg_loss}, iou={iou_loss}, total={total})"
    )]
    Diverged {
        step: usize,
        lr: f64,
        seg_loss: f64,
        iou_loss: f64,
        total: f64,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn checkpoint(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
