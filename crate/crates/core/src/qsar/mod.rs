//! Property-prediction models over fixed-length feature vectors, k-fold
//! cross-validation and evaluation metrics.

mod cv;
mod metrics;
mod nets;
mod ridge;

pub use cv::{assign_folds, fit_predict, grid_search_ridge, kfold_cv, CvReport};
pub use metrics::{accuracy, f1, metric_map, r2, rmse};
pub use nets::{mlp_predict, mlp_train, resnet1d_predict, resnet1d_train, NetModel};
pub use ridge::{ridge_fit, RidgeModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem_data::TaskKind;

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum QsarError {
    #[error("non-finite or inconsistent numeric input: {0}")]
    Numeric(String),
    #[error("target is constant; R² is undefined")]
    DegenerateTarget,
    #[error("cross-validation error: {0}")]
    Cv(String),
    #[error("training unstable: {skipped} of {total} batches had non-finite gradients")]
    TrainingUnstable { skipped: usize, total: usize },
    #[error("{0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "ResNet1D")]
    ResNet1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QsarSpec {
    pub kind: ModelKind,
    pub task: TaskKind,
    pub seed: u64,
    pub ridge_lambda: f64,
    pub mlp_hidden: Vec<usize>,
    pub resnet_blocks: usize,
    pub resnet_channels: usize,
    pub resnet_kernel: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl QsarSpec {
    pub fn new(kind: ModelKind, task: TaskKind, seed: u64) -> Self {
        Self {
            kind,
            task,
            seed,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            mlp_hidden: vec![512, 512],
            resnet_blocks: 4,
            resnet_channels: 32,
            resnet_kernel: 3,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }

    pub fn linear(seed: u64) -> Self {
        Self::new(ModelKind::Lr, TaskKind::Regression, seed)
    }

    pub fn validate(&self) -> Result<(), QsarError> {
        let bad = |m: &str| Err(QsarError::Spec(m.into()));
        match self.kind {
            ModelKind::Lr if !(self.ridge_lambda >= 0.0) => bad("ridge_lambda must be non-negative"),
            ModelKind::Lr if self.task == TaskKind::Classification => {
                bad("LR is a regression model; use MLP or ResNet1D for classification")
            }
            ModelKind::Mlp if self.mlp_hidden.contains(&0) => bad("MLP widths must be positive"),
            ModelKind::ResNet1d if self.resnet_channels == 0 || self.resnet_kernel % 2 == 0 => {
                bad("ResNet1D needs positive channels and an odd kernel")
            }
            ModelKind::Mlp | ModelKind::ResNet1d if self.batch_size == 0 || !(self.learning_rate > 0.0) => {
                bad("batch_size and learning_rate must be positive")
            }
            _ => Ok(()),
        }
    }
}
