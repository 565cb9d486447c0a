//! Central finite-difference checks shared by the gradient tests and the
//! acceptance runner.

use molvae_core::chem_data::{encode_all, max_len_for, EncodedMolecule, TokenVocab};
use molvae_core::neural::{gru_step, linear, BoundGru, Graph, Gru, ParamStore, Tensor, Var};
use molvae_core::vae::{build_model, Arch, Batch, ConvSpec, VaeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element contributes a distinct direction.
fn project(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(out).to_vec();
    let w = rand_tensor(rng, &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Builds `f` on `inputs` as leaves, backpropagates, and compares every
/// input element against a central difference. Returns the max relative
/// error.
pub fn check<F>(inputs: &[Tensor], proj_seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor], as_leaf: bool| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts
            .iter()
            .map(|t| if as_leaf { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vs);
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let s = project(&mut g, out, &mut prng);
        (g, vs, s)
    };
    let (g, vs, s) = eval(inputs, true);
    let grads = g.backward(s);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data[i] -= H;
            let (gp, _, sp) = eval(&plus, false);
            let (gm, _, sm) = eval(&minus, false);
            let numeric = (gp.value(sp).item() - gm.value(sm).item()) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

fn run<F>(op: &'static str, instances: usize, seed: u64, mut one: F) -> OpCheck
where
    F: FnMut(&mut ChaCha8Rng, u64) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        worst = worst.max(one(&mut rng, seed * 1000 + i as u64));
    }
    OpCheck {
        op,
        instances,
        max_rel_err: worst,
    }
}

pub fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5))
}

pub fn linear_check(instances: usize) -> OpCheck {
    run("linear", instances, 1, |rng, s| {
        let (n, i, o) = dims(rng);
        let x = rand_tensor(rng, &[n, i], 1.0);
        let w = rand_tensor(rng, &[i, o], 1.0);
        let b = rand_tensor(rng, &[o], 1.0);
        check(&[x, w, b], s, |g, v| linear(g, v[0], v[1], v[2]).unwrap())
    })
}

pub fn gru_check(instances: usize) -> OpCheck {
    run("gru_step", instances, 2, |rng, s| {
        let (n, i, h) = dims(rng);
        let mut store = ParamStore::new();
        Gru::new(&mut store, "g", i, h, rng);
        let x = rand_tensor(rng, &[n, i], 1.0);
        let h0 = rand_tensor(rng, &[n, h], 1.0);
        let ps: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = vec![x, h0];
        inputs.extend(ps);
        check(&inputs, s, |g, v| {
            let bound = BoundGru {
                hidden: h,
                w_x: v[2],
                u_zr: v[3],
                u_h: v[4],
                b: v[5],
            };
            gru_step(g, v[0], v[1], &bound).unwrap()
        })
    })
}

pub fn conv1d_check(instances: usize) -> OpCheck {
    run("conv1d", instances, 3, |rng, s| {
        let n = rng.random_range(1..3);
        let c_in = rng.random_range(1..4);
        let c_out = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let l = k + rng.random_range(0..4);
        let x = rand_tensor(rng, &[n, c_in, l], 1.0);
        let w = rand_tensor(rng, &[c_out, c_in, k], 1.0);
        let b = rand_tensor(rng, &[c_out], 1.0);
        check(&[x, w, b], s, |g, v| g.conv1d(v[0], v[1], v[2], stride, padding).unwrap())
    })
}

pub fn wce_check(instances: usize) -> OpCheck {
    run("weighted_cross_entropy", instances, 4, |rng, s| {
        let m = rng.random_range(1..6);
        let v = rng.random_range(2..6);
        let logits = rand_tensor(rng, &[m, v], 2.0);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..v)).collect();
        let weights: Vec<f64> = (0..v).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        check(&[logits], s, |g, x| g.weighted_cross_entropy(x[0], &targets, &weights, &mask).unwrap())
    })
}

pub fn kl_check(instances: usize) -> OpCheck {
    run("kl_gaussian", instances, 5, |rng, s| {
        let n = rng.random_range(1..4);
        let d = rng.random_range(1..5);
        let mu = rand_tensor(rng, &[n, d], 1.5);
        let lv = rand_tensor(rng, &[n, d], 1.5);
        check(&[mu, lv], s, |g, v| g.kl_gaussian(v[0], v[1]).unwrap())
    })
}

/// Elementwise, pooling, reshaping and loss ops used inside the layers.
pub fn misc_checks(instances: usize) -> Vec<OpCheck> {
    vec![
        run("matmul", instances, 6, |rng, s| {
            let (n, k, m) = dims(rng);
            let a = rand_tensor(rng, &[n, k], 1.0);
            let b = rand_tensor(rng, &[k, m], 1.0);
            check(&[a, b], s, |g, v| g.matmul(v[0], v[1]).unwrap())
        }),
        run("sigmoid/tanh/exp/mul/sub", instances, 7, |rng, s| {
            let (n, d, _) = dims(rng);
            let a = rand_tensor(rng, &[n, d], 2.0);
            let b = rand_tensor(rng, &[n, d], 2.0);
            check(&[a, b], s, |g, v| {
                let sa = g.sigmoid(v[0]);
                let tb = g.tanh(v[1]);
                let e = g.exp(v[0]);
                let m = g.mul(sa, tb).unwrap();
                let d = g.sub(m, e).unwrap();
                g.affine(d, 0.7, -0.2)
            })
        }),
        run("channel_norm", instances, 8, |rng, s| {
            let n = rng.random_range(1..3);
            let c = rng.random_range(1..4);
            let l = rng.random_range(2..5);
            let x = rand_tensor(rng, &[n, c, l], 2.0);
            let gamma = rand_tensor(rng, &[c], 1.0);
            let beta = rand_tensor(rng, &[c], 1.0);
            check(&[x, gamma, beta], s, |g, v| g.channel_norm(v[0], v[1], v[2]).unwrap())
        }),
        run("mean_pool_last/reshape", instances, 9, |rng, s| {
            let (n, c, l) = dims(rng);
            let x = rand_tensor(rng, &[n, c * l], 1.0);
            check(&[x], s, |g, v| {
                let r = g.reshape(v[0], &[n, c, l]).unwrap();
                g.mean_pool_last(r).unwrap()
            })
        }),
        run("gather/concat/slice/select", instances, 10, |rng, s| {
            let (n, d, r) = dims(rng);
            let table = rand_tensor(rng, &[r + 1, d], 1.0);
            let other = rand_tensor(rng, &[n, d], 1.0);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..=r)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            check(&[table, other], s, |g, v| {
                let gathered = g.gather_rows(v[0], &ids).unwrap();
                let sel = g.select_rows(&mask, gathered, v[1]).unwrap();
                let wide = g.concat_cols(sel, v[1]).unwrap();
                let tall = g.concat_rows(&[wide, wide]).unwrap();
                g.slice_cols(tall, 1, 2 * d).unwrap()
            })
        }),
        run("mse/bce/mean", instances, 11, |rng, s| {
            let (n, d, _) = dims(rng);
            let p = rand_tensor(rng, &[n, d], 2.0);
            let t: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n * d).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            check(&[p], s, |g, v| {
                let a = g.mse(v[0], &t).unwrap();
                let b = g.bce_with_logits(v[0], &y).unwrap();
                let m = g.mean(v[0]);
                let ab = g.add(a, b).unwrap();
                g.add(ab, m).unwrap()
            })
        }),
    ]
}

fn toy_corpus() -> (TokenVocab, Vec<EncodedMolecule>, usize) {
    let smiles = ["CCO", "c1ccccc1", "CC(=O)N", "ClCCBr", "CN", "OCC(O)CO"];
    let max_len = max_len_for(&smiles);
    let vocab = TokenVocab::build(&smiles).unwrap();
    let (enc, _) = encode_all(&smiles, &vocab, max_len);
    let vocab = vocab.with_encoding_counts(&enc);
    (vocab, enc, max_len)
}

/// Finite differences on every parameter of a tiny VAE's total loss, with
/// the reparameterization noise held fixed.
pub fn vae_loss_check(arch: Arch, instances: usize) -> OpCheck {
    let name = match arch {
        Arch::Cvae => "vae_loss[CVAE+MLP head]",
        Arch::Pvae => "vae_loss[PVAE+linear head]",
    };
    let (vocab, enc, max_len) = toy_corpus();
    run(name, instances, 12 + arch as u64, |rng, s| {
        let mut cfg = VaeConfig::desk(arch, max_len).with_predictor(&["p0"]);
        cfg.latent_dim = 2;
        cfg.hidden_dim = 3;
        cfg.decoder_layers = 1 + (s as usize % 2);
        cfg.conv = ConvSpec {
            channels: vec![2, 2],
            kernels: vec![2, 3],
        };
        if let Some(p) = cfg.predictor.as_mut() {
            if let molvae_core::vae::PredictorHead::Mlp { hidden } = &mut p.head {
                *hidden = vec![3];
            }
        }
        cfg.seed = s;
        cfg.penalized = true;
        let mut model = build_model(&cfg, &vocab).unwrap();
        let n = rng.random_range(1..4);
        let mols: Vec<&EncodedMolecule> = (0..n).map(|_| &enc[rng.random_range(0..enc.len())]).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = Batch {
            mols,
            targets: Some(targets),
        };
        let kl_weight = 0.7;
        let (_, analytic) = model
            .loss_and_grads(&batch, kl_weight, &mut ChaCha8Rng::seed_from_u64(s))
            .unwrap();
        let total = |m: &molvae_core::vae::VaeModel| {
            m.loss_and_grads(&batch, kl_weight, &mut ChaCha8Rng::seed_from_u64(s))
                .unwrap()
                .0
                .total
        };
        let mut worst: f64 = 0.0;
        let ids: Vec<_> = model.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            for i in 0..model.params.get(id).len() {
                let orig = model.params.get(id).data[i];
                model.params.get_mut(id).data[i] = orig + H;
                let fp = total(&model);
                model.params.get_mut(id).data[i] = orig - H;
                let fm = total(&model);
                model.params.get_mut(id).data[i] = orig;
                worst = worst.max(rel_err(analytic[k][i], (fp - fm) / (2.0 * H)));
            }
        }
        worst
    })
}

/// Every check at the requested instance count.
pub fn full_suite(instances: usize) -> Vec<OpCheck> {
    let mut out = vec![
        linear_check(instances),
        gru_check(instances),
        conv1d_check(instances),
        wce_check(instances),
        kl_check(instances),
    ];
    out.extend(misc_checks(instances));
    out.push(vae_loss_check(Arch::Pvae, instances));
    out.push(vae_loss_check(Arch::Cvae, instances));
    out
}
