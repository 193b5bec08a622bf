//! Parameter storage, layers and optimizers shared by every trainable head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Matrix;

pub type ParamId = usize;

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    trainable: Vec<bool>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, flag) in self.names.iter().zip(self.trainable.iter_mut()) {
            if name.starts_with(prefix) {
                *flag = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Copies tensors with matching names and shapes from `other`; returns
    /// how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, value) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.values[id].shape() == value.shape() {
                    self.values[id] = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Xavier-style normal init.
pub fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Matrix::randn(rows, cols, std, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(input, output, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, output));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, width));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Single-head scaled dot-product self-attention.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    width: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, rng),
            width,
        }
    }

    /// `mask` is added to the attention scores before the softmax.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Matrix>) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let scores = g.matmul_t(q, k);
        let mut scores = g.scale(scores, 1.0 / (self.width as f64).sqrt());
        if let Some(mask) = mask {
            let m = g.constant(mask.clone());
            scores = g.add(scores, m);
        }
        let attn = g.softmax_rows(scores);
        let ctx = g.matmul(attn, v);
        self.out.forward(g, ctx)
    }
}

/// Single-head attention from `x` onto a separate `context` sequence.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    width: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, rng),
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, context: Var) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, 1.0 / (self.width as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let ctx = g.matmul(attn, v);
        self.out.forward(g, ctx)
    }
}

/// Additive causal mask: position `i` may attend to `j ≤ i`.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m[(i, j)] = -1e9;
        }
    }
    m
}

/// Pre-norm transformer block with optional dropout and drop-path.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// Stochastic regularization applied by [`TransformerBlock::forward`] in training mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub dropout: f64,
    pub drop_path: f64,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, 2 * width, width, rng),
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mask: Option<&Matrix>,
        reg: Regularization,
        rng: &mut R,
    ) -> Var {
        let h = self.norm1.forward(g, x);
        let h = self.attn.forward(g, h, mask);
        let h = dropout(g, h, reg.dropout, rng);
        let h = drop_path(g, h, reg.drop_path, rng);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x);
        let h = self.mlp.forward(g, h);
        let h = dropout(g, h, reg.dropout, rng);
        let h = drop_path(g, h, reg.drop_path, rng);
        g.add(x, h)
    }
}

/// Inverted dropout; identity outside training or for `p == 0`.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Var {
    if !g.training() || p <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).shape();
    let keep = 1.0 - p;
    let data = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mask = g.constant(Matrix::from_vec(r, c, data));
    g.mul(x, mask)
}

/// Drops a whole residual branch with probability `p` (one sample per call).
pub fn drop_path<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Var {
    if !g.training() || p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let s = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
    g.scale(x, s)
}

/// AdamW moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, v)| Matrix::zeros(v.rows(), v.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(1.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm =
                    grads.iter().map(|(_, g)| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            let decay = if store.value(*id).rows() > 1 { self.weight_decay } else { 0.0 };
            let m = self.m[*id].as_mut_slice();
            let v = self.v[*id].as_mut_slice();
            let p = store.value_mut(*id).as_mut_slice();
            for k in 0..p.len() {
                let gk = grad.as_slice()[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * (mh / (vh.sqrt() + self.eps) + decay * p[k]);
            }
        }
    }
}

/// Linear warmup to `max_lr` followed by cosine decay to zero, in optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.max_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Sinusoidal position table (`n × width`).
pub fn sinusoidal_positions(n: usize, width: usize) -> Matrix {
    let mut m = Matrix::zeros(n, width);
    for pos in 0..n {
        for i in 0..width {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// Minibatch index order for one epoch.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Sums per-sample gradient lists in order; ids absent from a list count as zero.
pub fn sum_grads(parts: Vec<Vec<(ParamId, Matrix)>>) -> Vec<(ParamId, Matrix)> {
    let mut acc: BTreeMap<ParamId, Matrix> = BTreeMap::new();
    for part in parts {
        for (id, g) in part {
            match acc.get_mut(&id) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(id, g);
                }
            }
        }
    }
    acc.into_iter().collect()
}

/// Multiplies every gradient by `s`.
pub fn scale_grads(grads: &mut [(ParamId, Matrix)], s: f64) {
    for (_, g) in grads.iter_mut() {
        g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
    }
}
