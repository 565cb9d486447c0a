//! Minimal reverse-mode differentiation plus the layers and optimizer the
//! VAE, MLP and 1D ResNet need.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{gru_step, linear, BoundGru, BoundLinear, ChannelNormLayer, Conv1dLayer, Gru, Linear, Mlp};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState};
pub use params::{ManifestEntry, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
