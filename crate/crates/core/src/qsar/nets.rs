use rand::seq::SliceRandom;

use super::{ModelKind, QsarError, QsarSpec};
use crate::chem_data::TaskKind;
use crate::neural::{
    adam_step, clip_global_norm, AdamConfig, AdamState, ChannelNormLayer, Conv1dLayer, Graph, Linear, Mlp,
    NeuralError, ParamStore, Tensor, Var, GRAD_CLIP_NORM,
};
use crate::seeding::rng_for;

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv1dLayer,
    norm1: ChannelNormLayer,
    conv2: Conv1dLayer,
    norm2: ChannelNormLayer,
}

#[derive(Debug, Clone)]
struct ResNet {
    stem: Conv1dLayer,
    blocks: Vec<Block>,
    head: Linear,
}

#[derive(Debug, Clone)]
enum Net {
    Mlp(Mlp),
    ResNet(ResNet),
}

/// A trained MLP or 1D ResNet. Classification models emit probabilities.
#[derive(Debug, Clone)]
pub struct NetModel {
    pub params: ParamStore,
    task: TaskKind,
    net: Net,
}

fn build(spec: &QsarSpec, input: usize) -> NetModel {
    let mut rng = rng_for(spec.seed, "qsar/init");
    let mut p = ParamStore::new();
    let net = match spec.kind {
        ModelKind::ResNet1d => {
            let (c, k) = (spec.resnet_channels, spec.resnet_kernel);
            let pad = k / 2;
            let stem = Conv1dLayer::new(&mut p, "stem", 1, c, k, 1, pad, &mut rng);
            let blocks = (0..spec.resnet_blocks)
                .map(|i| Block {
                    conv1: Conv1dLayer::new(&mut p, &format!("b{i}.conv1"), c, c, k, 1, pad, &mut rng),
                    norm1: ChannelNormLayer::new(&mut p, &format!("b{i}.norm1"), c),
                    conv2: Conv1dLayer::new(&mut p, &format!("b{i}.conv2"), c, c, k, 1, pad, &mut rng),
                    norm2: ChannelNormLayer::new(&mut p, &format!("b{i}.norm2"), c),
                })
                .collect();
            let head = Linear::new(&mut p, "head", c, 1, &mut rng);
            Net::ResNet(ResNet { stem, blocks, head })
        }
        _ => Net::Mlp(Mlp::new(&mut p, "mlp", input, &spec.mlp_hidden, 1, &mut rng)),
    };
    NetModel {
        params: p,
        task: spec.task,
        net,
    }
}

impl NetModel {
    /// Raw network output `[N, 1]` (a logit for classification).
    fn forward(&self, g: &mut Graph, x: &[&Vec<f64>]) -> Result<Var, NeuralError> {
        let n = x.len();
        let d = x.first().map_or(0, |r| r.len());
        let data: Vec<f64> = x.iter().flat_map(|r| r.iter().copied()).collect();
        match &self.net {
            Net::Mlp(mlp) => {
                let xv = g.constant(Tensor::new(&[n, d], data)?);
                mlp.forward(g, &self.params, xv)
            }
            Net::ResNet(r) => {
                let xv = g.constant(Tensor::new(&[n, 1, d], data)?);
                let stem = r.stem.forward(g, &self.params, xv)?;
                let mut h = g.relu(stem);
                for b in &r.blocks {
                    let a = b.conv1.forward(g, &self.params, h)?;
                    let a = b.norm1.forward(g, &self.params, a)?;
                    let a = g.relu(a);
                    let a = b.conv2.forward(g, &self.params, a)?;
                    let a = b.norm2.forward(g, &self.params, a)?;
                    let sum = g.add(h, a)?;
                    h = g.relu(sum);
                }
                let pooled = g.mean_pool_last(h)?;
                r.head.bind(g, &self.params).forward(g, pooled)
            }
        }
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, QsarError> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(512) {
            let mut g = Graph::new();
            let refs: Vec<&Vec<f64>> = chunk.iter().collect();
            let y = self.forward(&mut g, &refs).map_err(|e| QsarError::Numeric(e.to_string()))?;
            out.extend(g.value(y).data.iter().map(|&v| match self.task {
                TaskKind::Regression => v,
                TaskKind::Classification => 1.0 / (1.0 + (-v).exp()),
            }));
        }
        Ok(out)
    }
}

fn train_net(spec: &QsarSpec, x: &[Vec<f64>], y: &[f64]) -> Result<NetModel, QsarError> {
    spec.validate()?;
    if x.len() != y.len() || x.is_empty() {
        return Err(QsarError::Numeric(format!("{} rows for {} targets", x.len(), y.len())));
    }
    let mut model = build(spec, x[0].len());
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: spec.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = rng_for(spec.seed, "qsar/shuffle");
    let mut order: Vec<usize> = (0..x.len()).collect();
    let total = spec.epochs * x.len().div_ceil(spec.batch_size);
    let mut skipped = 0usize;
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch_size) {
            let xs: Vec<&Vec<f64>> = chunk.iter().map(|&i| &x[i]).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let step = (|| -> Result<(), NeuralError> {
                let out = model.forward(&mut g, &xs)?;
                let loss = match spec.task {
                    TaskKind::Regression => g.mse(out, &ys)?,
                    TaskKind::Classification => g.bce_with_logits(out, &ys)?,
                };
                if !g.value(loss).item().is_finite() {
                    return Err(NeuralError::NonFiniteGradient);
                }
                let grads = g.backward(loss);
                let mut pg = g.param_grads(&grads, &model.params);
                clip_global_norm(&mut pg, GRAD_CLIP_NORM);
                adam_step(&mut model.params, &pg, &mut adam)
            })();
            match step {
                Ok(()) => {}
                Err(NeuralError::NonFiniteGradient) => {
                    skipped += 1;
                    if skipped as f64 > 0.01 * total as f64 {
                        return Err(QsarError::TrainingUnstable { skipped, total });
                    }
                }
                Err(e) => return Err(QsarError::Numeric(e.to_string())),
            }
        }
    }
    Ok(model)
}

pub fn mlp_train(spec: &QsarSpec, x: &[Vec<f64>], y: &[f64]) -> Result<NetModel, QsarError> {
    if spec.kind != ModelKind::Mlp {
        return Err(QsarError::Spec("mlp_train needs kind MLP".into()));
    }
    train_net(spec, x, y)
}

pub fn mlp_predict(model: &NetModel, x: &[Vec<f64>]) -> Result<Vec<f64>, QsarError> {
    model.predict(x)
}

pub fn resnet1d_train(spec: &QsarSpec, x: &[Vec<f64>], y: &[f64]) -> Result<NetModel, QsarError> {
    if spec.kind != ModelKind::ResNet1d {
        return Err(QsarError::Spec("resnet1d_train needs kind ResNet1D".into()));
    }
    train_net(spec, x, y)
}

pub fn resnet1d_predict(model: &NetModel, x: &[Vec<f64>]) -> Result<Vec<f64>, QsarError> {
    model.predict(x)
}
