use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] hesam_core::Error),
    #[error("dataset has {data} channels but the model expects {model}")]
    ChannelMismatch { data: usize, model: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e}); last finite loss {last_loss:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lr: f64,
        last_loss: Option<f64>,
    },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
