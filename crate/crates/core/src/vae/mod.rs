//! Character-level SMILES VAEs with an optional descriptor-predictor head.
//!
//! Two architectures share one decoder: the convolutional-encoder CVAE and
//! the recurrent-encoder PVAE, whose reconstruction loss is weighted by
//! inverse character prevalence.

mod bundle;
mod embed;
mod model;
mod train;

pub use bundle::{load_bundle, save_bundle, Normalizer};
pub use embed::{descriptor_probe, embed, reconstruction_accuracy, EmbedMode, EmbeddingSet, ProbeResult};
pub use model::{build_model, penalized_weights, Batch, LossValues, VaeModel};
pub use train::{train, EpochLog, TrainLog, TrainOptions};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem_data::DataError;
use crate::neural::NeuralError;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid VAE config: {0}")]
    Config(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error("training unstable: {skipped} of {total} batches had non-finite gradients")]
    TrainingUnstable { skipped: usize, total: usize },
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Neural(#[from] NeuralError),
    #[error("{0}")]
    Cv(String),
    #[error("constant column cannot be probed")]
    DegenerateColumn,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Arch {
    Cvae,
    Pvae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PredictorHead {
    /// ReLU MLP with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub descriptor_names: Vec<String>,
    pub head: PredictorHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub arch: Arch,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Convolution stack of the CVAE encoder; ignored by the PVAE.
    pub conv: ConvSpec,
    pub decoder_layers: usize,
    pub predictor: Option<PredictorSpec>,
    pub beta: f64,
    pub lambda_pred: f64,
    pub penalized: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl VaeConfig {
    /// Reduced preset sized for a single CPU.
    pub fn desk(arch: Arch, max_len: usize) -> Self {
        Self {
            arch,
            latent_dim: 64,
            hidden_dim: 128,
            conv: ConvSpec {
                channels: vec![9, 9, 10],
                kernels: vec![9, 9, 10],
            },
            decoder_layers: 1,
            predictor: None,
            beta: 1.0,
            lambda_pred: 1.0,
            penalized: arch == Arch::Pvae,
            max_len,
            seed: 0,
        }
    }

    pub fn full(arch: Arch, max_len: usize) -> Self {
        Self {
            latent_dim: 196,
            hidden_dim: 488,
            decoder_layers: 3,
            ..Self::desk(arch, max_len)
        }
    }

    /// Adds the architecture's default predictor head for `names`.
    pub fn with_predictor(mut self, names: &[&str]) -> Self {
        let head = match self.arch {
            Arch::Cvae => {
                let w = if self.latent_dim >= 196 { 1000 } else { self.hidden_dim };
                PredictorHead::Mlp { hidden: vec![w; 3] }
            }
            Arch::Pvae => PredictorHead::Linear,
        };
        self.predictor = Some(PredictorSpec {
            descriptor_names: names.iter().map(|s| s.to_string()).collect(),
            head,
        });
        self
    }

    pub fn predictor_names(&self) -> &[String] {
        self.predictor.as_ref().map_or(&[], |p| p.descriptor_names.as_slice())
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let err = |m: &str| Err(VaeError::Config(m.to_string()));
        if self.latent_dim < 2 {
            return err("latent_dim must be at least 2");
        }
        if self.hidden_dim == 0 || self.decoder_layers == 0 {
            return err("hidden_dim and decoder_layers must be positive");
        }
        if !(self.lambda_pred >= 0.0) || !(self.beta >= 0.0) {
            return err("beta and lambda_pred must be non-negative");
        }
        if self.max_len < 2 {
            return err("max_len must be at least 2");
        }
        if let Some(p) = &self.predictor {
            if p.descriptor_names.is_empty() {
                return err("predictor needs at least one descriptor");
            }
        }
        if self.arch == Arch::Cvae {
            let c = &self.conv;
            if c.channels.is_empty() || c.channels.len() != c.kernels.len() {
                return err("conv channels and kernels must be non-empty and equal in length");
            }
            if c.channels.contains(&0) || c.kernels.contains(&0) {
                return err("conv channels and kernels must be positive");
            }
            let shrink: usize = c.kernels.iter().map(|k| k - 1).sum();
            if shrink >= self.max_len {
                return Err(VaeError::Config(format!(
                    "max_len {} too short for conv kernels {:?}",
                    self.max_len, c.kernels
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for arch in [Arch::Cvae, Arch::Pvae] {
            VaeConfig::desk(arch, 60).validate().unwrap();
            VaeConfig::full(arch, 120).with_predictor(&["MolLogP"]).validate().unwrap();
        }
        assert_eq!(VaeConfig::full(Arch::Pvae, 60).latent_dim, 196);
    }

    #[test]
    fn invalid_configs() {
        let mut c = VaeConfig::desk(Arch::Pvae, 60);
        c.latent_dim = 1;
        assert!(c.validate().is_err());
        let mut c = VaeConfig::desk(Arch::Pvae, 60);
        c.lambda_pred = -1.0;
        assert!(c.validate().is_err());
        assert!(VaeConfig::desk(Arch::Cvae, 20).validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = VaeConfig::desk(Arch::Cvae, 60).with_predictor(&["MolLogP", "TPSA"]);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"CVAE\""));
        assert_eq!(serde_json::from_str::<VaeConfig>(&s).unwrap(), c);
    }
}
