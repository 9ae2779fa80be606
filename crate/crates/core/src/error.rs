use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed instruction: {0}")]
    MalformedInstruction(String),

    #[error("invalid instruction field: {0}")]
    InvalidInstruction(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("mask shape {mask:?} does not match image shape {image:?}")]
    MaskShapeMismatch {
        mask: (usize, usize),
        image: (usize, usize),
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("backend failure on image {image_id}: {detail}")]
    BackendFailure { image_id: String, detail: String },

    #[error("corrupt dataset ({image_id}): {detail}")]
    CorruptDataset { image_id: String, detail: String },

    #[error("mask has no positive pixels")]
    EmptyMask,

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("unknown scorer: {0}")]
    UnknownScorer(String),

    #[error("results and triplets are misaligned: {0}")]
    Alignment(String),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("training diverged at step {step}")]
    DivergenceDetected { step: u64 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
