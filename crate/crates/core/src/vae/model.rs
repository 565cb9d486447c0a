use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::bundle::Normalizer;
use super::{Arch, PredictorHead, VaeConfig, VaeError};
use crate::chem_data::{EncodedMolecule, TokenVocab};
use crate::neural::{BoundGru, Conv1dLayer, Graph, Gru, Linear, Mlp, ParamStore, Tensor, Var};
use crate::seeding::rng_for;
use crate::stats::median;

#[derive(Debug, Clone)]
enum Encoder {
    Conv { convs: Vec<Conv1dLayer>, dense: Linear },
    Recurrent(Gru),
}

#[derive(Debug, Clone)]
struct Layers {
    encoder: Encoder,
    mu: Linear,
    logvar: Linear,
    init: Vec<Linear>,
    decoder: Vec<Gru>,
    dec_z: Linear,
    out: Linear,
    predictor: Option<Mlp>,
}

/// A trained or freshly initialized VAE together with everything needed to
/// encode new molecules.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub params: ParamStore,
    pub vocab: TokenVocab,
    /// Per-descriptor standardization fitted on the training split.
    pub normalizers: Option<Vec<Normalizer>>,
    class_weights: Vec<f64>,
    layers: Layers,
}

/// Prevalence weights `median(counts) / count`, clipped to [0.01, 100].
/// Zero-count tokens get weight 1.
pub fn penalized_weights(vocab: &TokenVocab) -> Vec<f64> {
    let nonzero: Vec<f64> = vocab.counts().iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    if nonzero.is_empty() {
        return vec![1.0; vocab.len()];
    }
    let med = median(&nonzero);
    vocab
        .counts()
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { (med / c as f64).clamp(0.01, 100.0) })
        .collect()
}

pub fn build_model(config: &VaeConfig, vocab: &TokenVocab) -> Result<VaeModel, VaeError> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "vae/init");
    let mut p = ParamStore::new();
    let (v, h, d) = (vocab.len(), config.hidden_dim, config.latent_dim);

    let (encoder, enc_out) = match config.arch {
        Arch::Cvae => {
            let mut convs = Vec::new();
            let (mut c_in, mut len) = (v, config.max_len);
            for (i, (&c, &k)) in config.conv.channels.iter().zip(&config.conv.kernels).enumerate() {
                convs.push(Conv1dLayer::new(&mut p, &format!("enc.conv{i}"), c_in, c, k, 1, 0, &mut rng));
                c_in = c;
                len = len + 1 - k;
            }
            let dense = Linear::new(&mut p, "enc.dense", c_in * len, h, &mut rng);
            (Encoder::Conv { convs, dense }, h)
        }
        Arch::Pvae => (Encoder::Recurrent(Gru::new(&mut p, "enc.gru", v, h, &mut rng)), h),
    };
    let mu = Linear::new(&mut p, "enc.mu", enc_out, d, &mut rng);
    let logvar = Linear::new(&mut p, "enc.logvar", enc_out, d, &mut rng);
    let mut init = Vec::new();
    let mut decoder = Vec::new();
    for l in 0..config.decoder_layers {
        init.push(Linear::new(&mut p, &format!("dec.init{l}"), d, h, &mut rng));
        let input = if l == 0 { v } else { h };
        decoder.push(Gru::new(&mut p, &format!("dec.gru{l}"), input, h, &mut rng));
    }
    let dec_z = Linear::new(&mut p, "dec.z", d, 3 * h, &mut rng);
    let out = Linear::new(&mut p, "dec.out", h, v, &mut rng);
    let predictor = config.predictor.as_ref().map(|spec| {
        let hidden: &[usize] = match &spec.head {
            PredictorHead::Mlp { hidden } => hidden,
            PredictorHead::Linear => &[],
        };
        Mlp::new(&mut p, "pred", d, hidden, spec.descriptor_names.len(), &mut rng)
    });

    let class_weights = if config.penalized {
        penalized_weights(vocab)
    } else {
        vec![1.0; v]
    };
    Ok(VaeModel {
        config: config.clone(),
        params: p,
        vocab: vocab.clone(),
        normalizers: None,
        class_weights,
        layers: Layers {
            encoder,
            mu,
            logvar,
            init,
            decoder,
            dec_z,
            out,
            predictor,
        },
    })
}

/// A minibatch. `targets` holds standardized descriptor values, row-major
/// `[N, P]`, and is required exactly when the model has a predictor.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub mols: Vec<&'a EncodedMolecule>,
    pub targets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub pred: f64,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub pred: Option<Var>,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).item(),
            recon: g.value(self.recon).item(),
            kl: g.value(self.kl).item(),
            pred: self.pred.map_or(0.0, |p| g.value(p).item()),
        }
    }
}

struct Decoder {
    grus: Vec<BoundGru>,
    zproj: Var,
    h: Vec<Var>,
}

impl VaeModel {
    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn has_predictor(&self) -> bool {
        self.layers.predictor.is_some()
    }

    /// Replaces every parameter with the same-named, same-shaped tensor
    /// from `other`.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<(), VaeError> {
        if other.len() != self.params.len() {
            return Err(VaeError::Config("checkpoint has a different parameter count".into()));
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = other
                .find(&name)
                .ok_or_else(|| VaeError::Config(format!("checkpoint lacks {name}")))?;
            let t = other.get(src);
            if t.shape != self.params.get(id).shape {
                return Err(VaeError::Config(format!("shape mismatch for {name}")));
            }
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Encoder forward pass: `(mu, logvar)`, each `[N, D]`.
    pub(crate) fn encode_graph(&self, g: &mut Graph, mols: &[&EncodedMolecule]) -> Result<(Var, Var), VaeError> {
        let n = mols.len();
        let l = &self.layers;
        let hidden = match &l.encoder {
            Encoder::Recurrent(gru) => {
                let bound = gru.bind(g, &self.params);
                let steps = mols.iter().map(|m| m.valid_len).max().unwrap_or(0);
                let mut h = g.constant(Tensor::zeros(&[n, self.config.hidden_dim]));
                for t in 0..steps {
                    let ids: Vec<usize> = mols.iter().map(|m| m.token_ids[t]).collect();
                    let gx = bound.project_ids(g, &ids)?;
                    let hn = bound.cell(g, gx, h)?;
                    let mask: Vec<bool> = mols.iter().map(|m| t < m.valid_len).collect();
                    h = if mask.iter().all(|&b| b) {
                        hn
                    } else {
                        g.select_rows(&mask, hn, h)?
                    };
                }
                h
            }
            Encoder::Conv { convs, dense } => {
                let (v, len) = (self.vocab.len(), self.config.max_len);
                let mut onehot = vec![0.0; n * v * len];
                for (i, m) in mols.iter().enumerate() {
                    for (t, &id) in m.token_ids.iter().enumerate() {
                        onehot[i * v * len + id * len + t] = 1.0;
                    }
                }
                let mut x = g.constant(Tensor::new(&[n, v, len], onehot)?);
                for conv in convs {
                    let y = conv.forward(g, &self.params, x)?;
                    x = g.relu(y);
                }
                let flat_len = g.value(x).row_len();
                let flat = g.reshape(x, &[n, flat_len])?;
                let y = dense.bind(g, &self.params).forward(g, flat)?;
                g.relu(y)
            }
        };
        let mu = l.mu.bind(g, &self.params).forward(g, hidden)?;
        let logvar = l.logvar.bind(g, &self.params).forward(g, hidden)?;
        Ok((mu, logvar))
    }

    fn start_decoder(&self, g: &mut Graph, z: Var) -> Result<Decoder, VaeError> {
        let l = &self.layers;
        let mut h = Vec::with_capacity(l.decoder.len());
        for init in &l.init {
            let pre = init.bind(g, &self.params).forward(g, z)?;
            h.push(g.tanh(pre));
        }
        let zproj = l.dec_z.bind(g, &self.params).forward(g, z)?;
        let grus = l.decoder.iter().map(|gru| gru.bind(g, &self.params)).collect();
        Ok(Decoder { grus, zproj, h })
    }

    /// Advances the decoder one step on input tokens `ids`; returns the top
    /// hidden state.
    fn decoder_step(&self, g: &mut Graph, dec: &mut Decoder, ids: &[usize]) -> Result<Var, VaeError> {
        let tok = dec.grus[0].project_ids(g, ids)?;
        let gx = g.add(tok, dec.zproj)?;
        dec.h[0] = dec.grus[0].cell(g, gx, dec.h[0])?;
        for layer in 1..dec.grus.len() {
            dec.h[layer] = dec.grus[layer].step(g, dec.h[layer - 1], dec.h[layer])?;
        }
        Ok(*dec.h.last().expect("at least one decoder layer"))
    }

    /// Teacher-forced decoder logits `[T*N, V]` (step-major) for `z [N, D]`,
    /// with the matching targets and loss mask.
    fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        z: Var,
        mols: &[&EncodedMolecule],
    ) -> Result<(Var, Vec<usize>, Vec<bool>), VaeError> {
        let steps = mols.iter().map(|m| m.valid_len).max().unwrap_or(0);
        let mut dec = self.start_decoder(g, z)?;
        let mut tops = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * mols.len());
        let mut mask = Vec::with_capacity(steps * mols.len());
        for t in 0..steps {
            let prev: Vec<usize> = mols
                .iter()
                .map(|m| if t == 0 { self.vocab.start_id() } else { m.token_ids[t - 1] })
                .collect();
            tops.push(self.decoder_step(g, &mut dec, &prev)?);
            for m in mols {
                targets.push(m.token_ids[t]);
                mask.push(t < m.valid_len);
            }
        }
        let stacked = g.concat_rows(&tops)?;
        let logits = self.layers.out.bind(g, &self.params).forward(g, stacked)?;
        Ok((logits, targets, mask))
    }

    /// Builds the full loss on `g`. `kl_weight` replaces `beta` so warm-up
    /// schedules can scale it.
    pub(crate) fn loss_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        kl_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossVars, VaeError> {
        let n = batch.mols.len();
        let d = self.config.latent_dim;
        let (mu, logvar) = self.encode_graph(g, &batch.mols)?;
        let eps: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let eps = g.constant(Tensor::new(&[n, d], eps)?);
        let half = g.scale(logvar, 0.5);
        let sigma = g.exp(half);
        let noise = g.mul(sigma, eps)?;
        let z = g.add(mu, noise)?;

        let (logits, targets, mask) = self.decode_teacher_forced(g, z, &batch.mols)?;
        let recon = g.weighted_cross_entropy(logits, &targets, &self.class_weights, &mask)?;
        let kl_rows = g.kl_gaussian(mu, logvar)?;
        let kl = g.mean(kl_rows);
        let kl_term = g.scale(kl, kl_weight);
        let mut total = g.add(recon, kl_term)?;

        let mut pred = None;
        if let Some(head) = &self.layers.predictor {
            let target = batch
                .targets
                .as_ref()
                .ok_or_else(|| VaeError::Config("predictor enabled but batch has no descriptor targets".into()))?;
            let out = head.forward(g, &self.params, z)?;
            let p = g.mse(out, target)?;
            let term = g.scale(p, self.config.lambda_pred);
            total = g.add(total, term)?;
            pred = Some(p);
        }
        Ok(LossVars { total, recon, kl, pred })
    }

    /// Loss components at full `beta`.
    pub fn loss(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<LossValues, VaeError> {
        let mut g = Graph::new();
        let vars = self.loss_graph(&mut g, batch, self.config.beta, rng)?;
        Ok(vars.values(&g))
    }

    /// Loss and gradients with respect to every parameter (store order).
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        kl_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossValues, Vec<Vec<f64>>), VaeError> {
        let mut g = Graph::new();
        let vars = self.loss_graph(&mut g, batch, kl_weight, rng)?;
        let values = vars.values(&g);
        let grads = g.backward(vars.total);
        Ok((values, g.param_grads(&grads, &self.params)))
    }

    /// `(mu, logvar)` rows for a batch.
    pub fn encode(&self, mols: &[&EncodedMolecule]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), VaeError> {
        let mut g = Graph::new();
        let (mu, lv) = self.encode_graph(&mut g, mols)?;
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        Ok((rows(g.value(mu)), rows(g.value(lv))))
    }

    /// Greedy autoregressive decode from latent rows, up to `max_len` steps.
    pub fn greedy_decode(&self, z: &[Vec<f64>]) -> Result<Vec<Vec<usize>>, VaeError> {
        let n = z.len();
        let mut g = Graph::new();
        let zv = g.constant(Tensor::from_rows(z)?);
        let mut dec = self.start_decoder(&mut g, zv)?;
        let out = self.layers.out.bind(&mut g, &self.params);
        let mut prev = vec![self.vocab.start_id(); n];
        let mut seqs = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..self.config.max_len {
            let top = self.decoder_step(&mut g, &mut dec, &prev)?;
            let logits = out.forward(&mut g, top)?;
            let lt = g.value(logits);
            for i in 0..n {
                let row = lt.row(i);
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (j, &x)| if x > acc.1 { (j, x) } else { acc })
                    .0;
                prev[i] = best;
                if !done[i] {
                    seqs[i].push(best);
                    if best == self.vocab.end_id() || best == self.vocab.pad_id() {
                        done[i] = true;
                    }
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs)
    }

    /// Predictor output (standardized units) for latent rows.
    pub fn predict_descriptors(&self, z: &[Vec<f64>]) -> Result<Option<Vec<Vec<f64>>>, VaeError> {
        let Some(head) = &self.layers.predictor else {
            return Ok(None);
        };
        let mut g = Graph::new();
        let zv = g.constant(Tensor::from_rows(z)?);
        let out = head.forward(&mut g, &self.params, zv)?;
        let t = g.value(out);
        Ok(Some((0..t.rows()).map(|i| t.row(i).to_vec()).collect()))
    }

    /// Standardizes raw descriptor rows with the model's normalizers.
    pub fn normalize_targets(&self, raw: &[Vec<f64>]) -> Result<Vec<f64>, VaeError> {
        let norms = self
            .normalizers
            .as_ref()
            .ok_or_else(|| VaeError::Config("model has no descriptor normalizers".into()))?;
        let mut out = Vec::with_capacity(raw.len() * norms.len());
        for row in raw {
            if row.len() != norms.len() {
                return Err(VaeError::Config("descriptor row width differs from predictor".into()));
            }
            out.extend(row.iter().zip(norms).map(|(x, nm)| nm.apply(*x)));
        }
        Ok(out)
    }
}
