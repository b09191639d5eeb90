use std::path::PathBuf;

use thiserror::Error;

use crate::dataio::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("input does not match the model: {0}")]
    Input(String),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("model has no softmax attention layers")]
    NoAttentionLayers,
    #[error("no relevance rule for layer kind `{0}`")]
    UnmappedLayer(String),
    #[error("invalid rule configuration: {0}")]
    RuleConfig(String),
    #[error("invalid ablation plan: {0}")]
    Ablation(String),
    #[error("invalid setting: {0}")]
    Setting(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown explainer `{0}`")]
    UnknownExplainer(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
