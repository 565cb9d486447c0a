//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every node that
//! depends on a trainable leaf.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::NeuralError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    SelectRows(Vec<bool>, Var, Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanPoolLast(Var),
    WeightedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        coef: Vec<f64>,
        probs: Vec<f64>,
    },
    KlGaussian(Var, Var),
    Mse(Var, Vec<f64>),
    BceWithLogits(Var, Vec<f64>),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(msg: impl Into<String>) -> NeuralError {
    NeuralError::Shape(msg.into())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a copy of a stored parameter on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `x [N,O] + b [O]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, NeuralError> {
        let (n, o) = self.value(x).dims2()?;
        if self.value(b).len() != o {
            return Err(shape_err(format!("bias of length {} for {o} columns", self.value(b).len())));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(o) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::AddRowBias(x, b), ng))
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NeuralError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor { shape, data: out, grad: None }, op, ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map_op(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, f64::exp, Op::Exp(a))
    }

    /// Row lookup `table[ids]`, equivalent to a one-hot matmul.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NeuralError> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err(format!("row {bad} out of range for {v} rows")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, Op::GatherRows(table, ids.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let tail: Vec<usize> = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err("concat_rows with mismatched trailing dims"));
            }
            rows += self.shape(p)[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (n, ca) = self.value(a).dims2()?;
        let (n2, cb) = self.value(b).dims2()?;
        if n != n2 {
            return Err(shape_err("concat_cols with different row counts"));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[n, ca + cb], out)?, Op::ConcatCols(a, b), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NeuralError> {
        let (n, c) = self.value(a).dims2()?;
        if start >= end || end > c {
            return Err(shape_err(format!("slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for row in self.data(a).chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&[n, w], out)?, Op::SliceCols(a, start, end), ng))
    }

    /// Row-wise choice: row `i` comes from `a` when `mask[i]`, else from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var, NeuralError> {
        if self.shape(a) != self.shape(b) || self.shape(a)[0] != mask.len() {
            return Err(shape_err("select_rows shape mismatch"));
        }
        let w = self.value(a).row_len();
        let mut out = Vec::with_capacity(self.value(a).len());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { self.data(a) } else { self.data(b) };
            out.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SelectRows(mask.to_vec(), a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NeuralError> {
        let data = self.data(a).to_vec();
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Cross-correlation of `x [N,C,L]` with `w [O,C,K]` plus bias `b [O]`,
    /// zero-padded by `padding` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var, NeuralError> {
        let (n, c, l) = match self.shape(x) {
            [n, c, l] => (*n, *c, *l),
            s => return Err(shape_err(format!("conv1d input must be [N,C,L], got {s:?}"))),
        };
        let (o, c2, k) = match self.shape(w) {
            [o, c2, k] => (*o, *c2, *k),
            s => return Err(shape_err(format!("conv1d kernel must be [O,C,K], got {s:?}"))),
        };
        if c != c2 || self.value(b).len() != o || stride == 0 {
            return Err(shape_err("conv1d channel/bias mismatch"));
        }
        let lp = l + 2 * padding;
        if lp < k {
            return Err(shape_err(format!("conv1d length {lp} shorter than kernel {k}")));
        }
        let lo = (lp - k) / stride + 1;
        let mut out = vec![0.0; n * o * lo];
        let mut cols = vec![0.0; c * k * lo];
        for s in 0..n {
            im2col(&self.data(x)[s * c * l..(s + 1) * c * l], c, l, k, stride, padding, lo, &mut cols);
            let dst = &mut out[s * o * lo..(s + 1) * o * lo];
            for (oi, row) in dst.chunks_mut(lo).enumerate() {
                row.fill(self.data(b)[oi]);
            }
            gemm(o, c * k, lo, 1.0, self.data(w), false, &cols, false, 1.0, dst);
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Tensor::new(&[n, o, lo], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            ng,
        ))
    }

    /// Per-sample normalization of `x [N,C,L]` over its C·L values, then a
    /// per-channel affine map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NeuralError> {
        const EPS: f64 = 1e-5;
        let (n, c, l) = match self.shape(x) {
            [n, c, l] => (*n, *c, *l),
            s => return Err(shape_err(format!("channel_norm input must be [N,C,L], got {s:?}"))),
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("channel_norm affine size mismatch"));
        }
        let m = c * l;
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for s in 0..n {
            let xs = &self.data(x)[s * m..(s + 1) * m];
            let mu = xs.iter().sum::<f64>() / m as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[s] = is;
            for ci in 0..c {
                let (g, bb) = (self.data(gamma)[ci], self.data(beta)[ci]);
                for li in 0..l {
                    let idx = s * m + ci * l + li;
                    let h = (xs[ci * l + li] - mu) * is;
                    xhat[idx] = h;
                    out[idx] = g * h + bb;
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[n, c, l], out)?,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean over the last axis: `[N,C,L] -> [N,C]`.
    pub fn mean_pool_last(&mut self, x: Var) -> Result<Var, NeuralError> {
        let (n, c, l) = match self.shape(x) {
            [n, c, l] => (*n, *c, *l),
            s => return Err(shape_err(format!("mean_pool_last input must be [N,C,L], got {s:?}"))),
        };
        let out: Vec<f64> = self.data(x).chunks(l).map(|ch| ch.iter().sum::<f64>() / l as f64).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::MeanPoolLast(x), ng))
    }

    /// Weight-normalized masked cross-entropy of `logits [M,V]` against
    /// `targets`: `−Σ w[t]·log p[t] / Σ w[t]` over unmasked rows.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: &[f64],
        mask: &[bool],
    ) -> Result<Var, NeuralError> {
        let (m, v) = self.value(logits).dims2()?;
        if targets.len() != m || mask.len() != m || class_weights.len() != v {
            return Err(shape_err("weighted_cross_entropy size mismatch"));
        }
        if targets.iter().any(|&t| t >= v) {
            return Err(shape_err("target id out of range"));
        }
        let total_w: f64 = targets
            .iter()
            .zip(mask)
            .filter(|(_, &on)| on)
            .map(|(&t, _)| class_weights[t])
            .sum();
        let mut probs = vec![0.0; m * v];
        let mut coef = vec![0.0; m];
        let mut loss = 0.0;
        if total_w > 0.0 {
            for i in 0..m {
                if !mask[i] {
                    continue;
                }
                let row = &self.data(logits)[i * v..(i + 1) * v];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                let lse = mx + z.ln();
                for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
                coef[i] = class_weights[targets[i]] / total_w;
                loss -= coef[i] * (row[targets[i]] - lse);
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                coef,
                probs,
            },
            ng,
        ))
    }

    /// Per-row KL divergence of `N(mu, exp(logvar))` from `N(0, I)`: `[N]`.
    pub fn kl_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var, NeuralError> {
        if self.shape(mu) != self.shape(logvar) {
            return Err(shape_err("kl_gaussian mu/logvar shape mismatch"));
        }
        let (n, d) = self.value(mu).dims2()?;
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let mrow = &self.data(mu)[i * d..(i + 1) * d];
                let lrow = &self.data(logvar)[i * d..(i + 1) * d];
                0.5 * mrow
                    .iter()
                    .zip(lrow)
                    .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
                    .sum::<f64>()
            })
            .collect();
        let ng = self.ng(&[mu, logvar]);
        Ok(self.push(Tensor::new(&[n], out)?, Op::KlGaussian(mu, logvar), ng))
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var, NeuralError> {
        if self.value(pred).len() != target.len() || target.is_empty() {
            return Err(shape_err("mse size mismatch"));
        }
        let n = target.len() as f64;
        let loss = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let ng = self.ng(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target.to_vec()), ng))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, NeuralError> {
        if self.value(logits).len() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce size mismatch"));
        }
        let n = targets.len() as f64;
        let loss = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&l, &y)| softplus(l) - y * l)
            .sum::<f64>()
            / n;
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets.to_vec()), ng))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum::<f64>();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    // ---- backward ----------------------------------------------------

    /// Backpropagates from `root`, seeding its gradient with ones. Only leaf
    /// gradients are retained.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    /// Collects gradients of parameter leaves into store order; parameters
    /// absent from the tape get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                for (o, gv) in out[pid.index()].iter_mut().zip(g) {
                    *o += gv;
                }
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked in forward");
                let n = self.value(*b).dims2().expect("checked in forward").1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| gemm(m, n, k, 1.0, g, false, bd, true, 1.0, ga));
                self.accum(grads, *b, |gb| gemm(k, m, n, 1.0, ad, true, g, false, 1.0, gb));
            }
            Op::AddRowBias(x, b) => {
                let o = self.value(*b).len();
                self.accum(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += v));
                self.accum(grads, *b, |gb| {
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                self.accum(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                self.accum(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, v)| *x -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Affine(a, s) => {
                self.accum(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += s * v));
            }
            Op::Sigmoid(a) => self.accum(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh(a) => self.accum(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu(a) => {
                let ad = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Exp(a) => self.accum(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::GatherRows(table, ids) => {
                let d = self.value(*table).row_len();
                self.accum(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let piece = &g[off..off + len];
                    self.accum(grads, *p, |gp| gp.iter_mut().zip(piece).for_each(|(x, v)| *x += v));
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = self.value(*a).dims2().expect("checked");
                let cb = self.value(*b).dims2().expect("checked").1;
                let w = ca + cb;
                self.accum(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * w + j];
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let (n, c) = self.value(*a).dims2().expect("checked");
                let w = end - start;
                self.accum(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..w {
                            ga[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::SelectRows(mask, a, b) => {
                let w = self.value(*a).row_len();
                self.accum(grads, *a, |ga| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for j in i * w..(i + 1) * w {
                                ga[j] += g[j];
                            }
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for j in i * w..(i + 1) * w {
                                gb[j] += g[j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let [n, c, l] = self.shape(*x) else { unreachable!() };
                let (n, c, l) = (*n, *c, *l);
                let [o, _, k] = self.shape(*w) else { unreachable!() };
                let (o, k) = (*o, *k);
                let lo = node.value.shape[2];
                let mut cols = vec![0.0; c * k * lo];
                let mut dcols = vec![0.0; c * k * lo];
                let xd = self.data(*x);
                let wd = self.data(*w);
                self.accum(grads, *b, |gb| {
                    for s in 0..n {
                        for oi in 0..o {
                            gb[oi] += g[(s * o + oi) * lo..(s * o + oi + 1) * lo].iter().sum::<f64>();
                        }
                    }
                });
                if self.nodes[w.0].needs_grad {
                    let mut gw = vec![0.0; o * c * k];
                    for s in 0..n {
                        im2col(&xd[s * c * l..(s + 1) * c * l], c, l, k, *stride, *padding, lo, &mut cols);
                        let gs = &g[s * o * lo..(s + 1) * o * lo];
                        gemm(o, lo, c * k, 1.0, gs, false, &cols, true, 1.0, &mut gw);
                    }
                    self.accum(grads, *w, |dst| dst.iter_mut().zip(&gw).for_each(|(a, v)| *a += v));
                }
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; n * c * l];
                    for s in 0..n {
                        let gs = &g[s * o * lo..(s + 1) * o * lo];
                        gemm(c * k, o, lo, 1.0, wd, true, gs, false, 0.0, &mut dcols);
                        col2im(&dcols, c, l, k, *stride, *padding, lo, &mut gx[s * c * l..(s + 1) * c * l]);
                    }
                    self.accum(grads, *x, |dst| dst.iter_mut().zip(&gx).for_each(|(a, v)| *a += v));
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, l] = self.shape(*x) else { unreachable!() };
                let (n, c, l) = (*n, *c, *l);
                let m = c * l;
                let gd = self.data(*gamma);
                self.accum(grads, *gamma, |gg| {
                    for s in 0..n {
                        for ci in 0..c {
                            for li in 0..l {
                                let i = s * m + ci * l + li;
                                gg[ci] += g[i] * xhat[i];
                            }
                        }
                    }
                });
                self.accum(grads, *beta, |gb| {
                    for s in 0..n {
                        for ci in 0..c {
                            gb[ci] += g[s * m + ci * l..s * m + (ci + 1) * l].iter().sum::<f64>();
                        }
                    }
                });
                self.accum(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; m];
                    for s in 0..n {
                        for ci in 0..c {
                            for li in 0..l {
                                dxhat[ci * l + li] = g[s * m + ci * l + li] * gd[ci];
                            }
                        }
                        let xh = &xhat[s * m..(s + 1) * m];
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            gx[s * m + j] += inv_std[s] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::MeanPoolLast(x) => {
                let l = self.shape(*x)[2];
                self.accum(grads, *x, |gx| {
                    for (chunk, gv) in gx.chunks_mut(l).zip(g) {
                        chunk.iter_mut().for_each(|a| *a += gv / l as f64);
                    }
                });
            }
            Op::WeightedCrossEntropy {
                logits,
                targets,
                coef,
                probs,
            } => {
                let v = self.value(*logits).row_len();
                let up = g[0];
                self.accum(grads, *logits, |gl| {
                    for (i, (&c, &t)) in coef.iter().zip(targets).enumerate() {
                        if c == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += up * c * probs[i * v + j];
                        }
                        gl[i * v + t] -= up * c;
                    }
                });
            }
            Op::KlGaussian(mu, logvar) => {
                let d = self.value(*mu).row_len();
                let md = self.data(*mu);
                let ld = self.data(*logvar);
                self.accum(grads, *mu, |gm| {
                    for i in 0..gm.len() {
                        gm[i] += g[i / d] * md[i];
                    }
                });
                self.accum(grads, *logvar, |gl| {
                    for i in 0..gl.len() {
                        gl[i] += g[i / d] * 0.5 * (ld[i].exp() - 1.0);
                    }
                });
            }
            Op::Mse(pred, target) => {
                let pd = self.data(*pred);
                let scale = 2.0 * g[0] / target.len() as f64;
                self.accum(grads, *pred, |gp| {
                    for i in 0..gp.len() {
                        gp[i] += scale * (pd[i] - target[i]);
                    }
                });
            }
            Op::BceWithLogits(logits, target) => {
                let ld = self.data(*logits);
                let scale = g[0] / target.len() as f64;
                self.accum(grads, *logits, |gl| {
                    for i in 0..gl.len() {
                        gl[i] += scale * (sigmoid(ld[i]) - target[i]);
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.accum(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Sum(a) => {
                self.accum(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
        }
    }
}

/// Unfolds one sample `[C,L]` into `[C*K, Lo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, l: usize, k: usize, stride: usize, pad: usize, lo: usize, cols: &mut [f64]) {
    for ci in 0..c {
        for ki in 0..k {
            let row = &mut cols[(ci * k + ki) * lo..(ci * k + ki + 1) * lo];
            for (t, dst) in row.iter_mut().enumerate() {
                let pos = (t * stride + ki) as isize - pad as isize;
                *dst = if pos >= 0 && (pos as usize) < l {
                    x[ci * l + pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, l: usize, k: usize, stride: usize, pad: usize, lo: usize, x: &mut [f64]) {
    for ci in 0..c {
        for ki in 0..k {
            let row = &cols[(ci * k + ki) * lo..(ci * k + ki + 1) * lo];
            for (t, v) in row.iter().enumerate() {
                let pos = (t * stride + ki) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l {
                    x[ci * l + pos as usize] += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_sum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_row_bias(xw, b).unwrap();
        assert_eq!(g.value(y).data, vec![3.0]);

        let x = g.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let xw = g.matmul(x, eye).unwrap();
        let y = g.add_row_bias(xw, zero).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NeuralError::Shape(_))));
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, 5.0]);
        let id = g.constant(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, id, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0]);
        let w3 = g.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(g.conv1d(x, w3, b, 1, 0).is_err());
        let x5 = g.constant(t(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.conv1d(x5, w, b, 2, 0).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, 7.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = g.weighted_cross_entropy(logits, &[1], &[1.0, 1.0], &[true]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let sharp = g.constant(t(&[1, 3], &[-800.0, 800.0, -800.0]));
        let l = g.weighted_cross_entropy(sharp, &[1], &[1.0; 3], &[true]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let logits = g.constant(t(&[2, 2], &[0.3, -1.0, 2.0, 0.1]));
        let a = g.weighted_cross_entropy(logits, &[0, 1], &[1.0, 3.0], &[true, true]).unwrap();
        let b = g.weighted_cross_entropy(logits, &[0, 1], &[2.0, 6.0], &[true, true]).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let mu = g.constant(t(&[3, 1], &[0.0, 1.0, 0.0]));
        let lv = g.constant(t(&[3, 1], &[0.0, 0.0, 4f64.ln()]));
        let kl = g.kl_gaussian(mu, lv).unwrap();
        let d = &g.value(kl).data;
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-12);
        assert!((d[2] - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn backward_through_reused_node() {
        // y = sum(x * x) => dy/dx = 2x
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
    }
}
