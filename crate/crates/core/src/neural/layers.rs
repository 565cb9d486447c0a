//! Parameterized building blocks. Each layer owns [`ParamId`]s; `bind`
//! places its parameters on a graph once so recurrent loops reuse them.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::NeuralError;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_uniform(&format!("{name}.w"), &[input, output], input, rng),
            b: store.add_uniform(&format!("{name}.b"), &[output], input, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
        }
    }
}

impl BoundLinear {
    /// `x W + b`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NeuralError> {
        let xw = g.matmul(x, self.w)?;
        g.add_row_bias(xw, self.b)
    }

    /// Same as `forward` on one-hot rows selected by `ids`.
    pub fn forward_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, NeuralError> {
        let rows = g.gather_rows(self.w, ids)?;
        g.add_row_bias(rows, self.b)
    }
}

/// `y = x W + b` as a free function over graph values.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, NeuralError> {
    BoundLinear { w, b }.forward(g, x)
}

/// Gated recurrent unit. Gate blocks are laid out `[z | r | candidate]`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    pub hidden: usize,
    pub w_x: Var,
    pub u_zr: Var,
    pub u_h: Var,
    pub b: Var,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input,
            hidden,
            w_x: store.add_uniform(&format!("{name}.w_x"), &[input, 3 * hidden], hidden, rng),
            u_zr: store.add_uniform(&format!("{name}.u_zr"), &[hidden, 2 * hidden], hidden, rng),
            u_h: store.add_uniform(&format!("{name}.u_h"), &[hidden, hidden], hidden, rng),
            b: store.add_uniform(&format!("{name}.b"), &[3 * hidden], hidden, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundGru {
        BoundGru {
            hidden: self.hidden,
            w_x: g.param(store, self.w_x),
            u_zr: g.param(store, self.u_zr),
            u_h: g.param(store, self.u_h),
            b: g.param(store, self.b),
        }
    }
}

impl BoundGru {
    /// Input contribution `x W_x + b` for all three gates: `[N, 3H]`.
    pub fn project(&self, g: &mut Graph, x: Var) -> Result<Var, NeuralError> {
        linear(g, x, self.w_x, self.b)
    }

    /// Input projection for one-hot token inputs.
    pub fn project_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, NeuralError> {
        BoundLinear { w: self.w_x, b: self.b }.forward_ids(g, ids)
    }

    /// One recurrence given the projected input `gx [N,3H]`:
    /// `z = σ(·)`, `r = σ(·)`, `h̃ = tanh(gx_h + (r⊙h) U_h)`,
    /// `h' = (1 − z)⊙h + z⊙h̃`.
    pub fn cell(&self, g: &mut Graph, gx: Var, h: Var) -> Result<Var, NeuralError> {
        let hd = self.hidden;
        let gh = g.matmul(h, self.u_zr)?;
        let gx_zr = g.slice_cols(gx, 0, 2 * hd)?;
        let pre_zr = g.add(gx_zr, gh)?;
        let zr = g.sigmoid(pre_zr);
        let z = g.slice_cols(zr, 0, hd)?;
        let r = g.slice_cols(zr, hd, 2 * hd)?;
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, self.u_h)?;
        let gx_h = g.slice_cols(gx, 2 * hd, 3 * hd)?;
        let pre_h = g.add(gx_h, rhu)?;
        let cand = g.tanh(pre_h);
        let diff = g.sub(cand, h)?;
        let step = g.mul(z, diff)?;
        g.add(h, step)
    }

    /// Full step from a raw input `x [N,I]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var, NeuralError> {
        let gx = self.project(g, x)?;
        self.cell(g, gx, h)
    }
}

/// Free-function form of one GRU step.
pub fn gru_step(g: &mut Graph, x: Var, h_prev: Var, params: &BoundGru) -> Result<Var, NeuralError> {
    params.step(g, x, h_prev)
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Self {
            w: store.add_uniform(&format!("{name}.w"), &[out_channels, in_channels, kernel], fan_in, rng),
            b: store.add_uniform(&format!("{name}.b"), &[out_channels], fan_in, rng),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NeuralError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct ChannelNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NeuralError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.channel_norm(x, gamma, beta)
    }
}

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: &[usize], output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NeuralError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.bind(g, store).forward(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
