use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bundle::Normalizer;
use super::embed::reconstruction_accuracy;
use super::model::{Batch, VaeModel};
use super::VaeError;
use crate::chem_data::EncodedMolecule;
use crate::neural::{adam_step, clip_global_norm, AdamConfig, AdamState, NeuralError, GRAD_CLIP_NORM};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of all optimizer steps over which the KL weight ramps
    /// linearly from 0 to `beta`.
    pub kl_warmup_fraction: f64,
    pub grad_clip: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            adam: AdamConfig::default(),
            kl_warmup_fraction: 0.1,
            grad_clip: GRAD_CLIP_NORM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub pred: f64,
    pub kl_weight: f64,
    pub val_recon_accuracy: Option<f64>,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (best validation accuracy).
    pub best_epoch: Option<usize>,
    pub skipped_batches: usize,
    pub total_batches: usize,
}

/// Trains `model` in place. `descriptors` holds raw per-molecule predictor
/// targets and is required when the model has a predictor; normalizers are
/// fitted on it unless the model already carries them.
pub fn train(
    model: &mut VaeModel,
    corpus: &[EncodedMolecule],
    descriptors: Option<&[Vec<f64>]>,
    val: &[EncodedMolecule],
    opts: &TrainOptions,
) -> Result<TrainLog, VaeError> {
    if opts.batch_size == 0 {
        return Err(VaeError::Config("batch_size must be positive".into()));
    }
    let mut log = TrainLog::default();
    if opts.epochs == 0 || corpus.is_empty() {
        return Ok(log);
    }
    let targets = if model.has_predictor() {
        let desc = descriptors.ok_or_else(|| VaeError::Config("predictor needs descriptor targets".into()))?;
        if desc.len() != corpus.len() {
            return Err(VaeError::Config("descriptor rows differ from corpus rows".into()));
        }
        if model.normalizers.is_none() {
            let width = model.config.predictor_names().len();
            let norms = (0..width)
                .map(|j| Normalizer::fit(&desc.iter().map(|r| r[j]).collect::<Vec<_>>()))
                .collect();
            model.normalizers = Some(norms);
        }
        Some(model.normalize_targets(desc)?)
    } else {
        None
    };
    let width = model.config.predictor_names().len();

    let batches_per_epoch = corpus.len().div_ceil(opts.batch_size);
    let total_steps = batches_per_epoch * opts.epochs;
    let warmup = (opts.kl_warmup_fraction * total_steps as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = rng_for(model.config.seed, "vae/shuffle");
    let mut noise_rng = rng_for(model.config.seed, "vae/noise");
    let mut adam = AdamState::new(&model.params, opts.adam);
    let mut best: Option<(f64, crate::neural::ParamStore)> = None;
    let mut step = 0usize;

    for epoch in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut used = 0usize;
        let mut skipped = 0usize;
        let mut kl_weight = model.config.beta;
        for chunk in order.chunks(opts.batch_size) {
            kl_weight = if warmup == 0 {
                model.config.beta
            } else {
                model.config.beta * ((step + 1) as f64 / warmup as f64).min(1.0)
            };
            step += 1;
            let batch = Batch {
                mols: chunk.iter().map(|&i| &corpus[i]).collect(),
                targets: targets
                    .as_ref()
                    .map(|t| chunk.iter().flat_map(|&i| t[i * width..(i + 1) * width].iter().copied()).collect()),
            };
            let (values, mut grads) = model.loss_and_grads(&batch, kl_weight, &mut noise_rng)?;
            let outcome = if values.total.is_finite() {
                clip_global_norm(&mut grads, opts.grad_clip);
                adam_step(&mut model.params, &grads, &mut adam)
            } else {
                Err(NeuralError::NonFiniteGradient)
            };
            match outcome {
                Ok(()) => {
                    used += 1;
                    for (s, v) in sums.iter_mut().zip([values.total, values.recon, values.kl, values.pred]) {
                        *s += v;
                    }
                }
                Err(NeuralError::NonFiniteGradient) => {
                    skipped += 1;
                    log.skipped_batches += 1;
                    log::warn!("epoch {epoch}: skipped a batch with non-finite gradients");
                    if log.skipped_batches as f64 > 0.01 * total_steps as f64 {
                        return Err(VaeError::TrainingUnstable {
                            skipped: log.skipped_batches,
                            total: total_steps,
                        });
                    }
                }
                Err(e) => return Err(e.into()),
            }
            log.total_batches += 1;
        }
        let denom = used.max(1) as f64;
        let val_acc = if val.is_empty() {
            None
        } else {
            Some(reconstruction_accuracy(model, val)?)
        };
        let entry = EpochLog {
            epoch,
            total: sums[0] / denom,
            recon: sums[1] / denom,
            kl: sums[2] / denom,
            pred: sums[3] / denom,
            kl_weight,
            val_recon_accuracy: val_acc,
            skipped_batches: skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} recon {:.4} kl {:.4} pred {:.4} val_acc {:?}",
            entry.total,
            entry.recon,
            entry.kl,
            entry.pred,
            entry.val_recon_accuracy
        );
        log.epochs.push(entry);
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                best = Some((acc, model.params.clone()));
                log.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    } else {
        log.best_epoch = Some(opts.epochs - 1);
    }
    Ok(log)
}
