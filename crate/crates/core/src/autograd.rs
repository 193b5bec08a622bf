//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it in reverse. Scalar losses with closed-form
//! gradients record their local gradients at forward time ([`Op::Scalar`]).

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddTiled(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    MeanRows(Var),
    GroupMeanRows(Var, usize),
    AvgPool2(Var),
    SumAll(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Scalar output whose gradient w.r.t. each input is stored up front.
    Scalar(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node>,
    store: Option<&'a ParamStore>,
    params: HashMap<ParamId, Var>,
    training: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, params: HashMap::new(), training: false }
    }

    pub fn with_params(store: &'a ParamStore, training: bool) -> Self {
        Self { nodes: Vec::new(), store: Some(store), params: HashMap::new(), training }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let requires_grad = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param, requires_grad);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Broadcast-adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, m.cols()), "add_row expects a 1x{} row", m.cols());
        let mut value = m.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Broadcast-multiplies every row of `a` by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, m.cols()), "mul_row expects a 1x{} row", m.cols());
        let mut value = m.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (m.rows(), 1), "mul_col expects a {}x1 column", m.rows());
        let mut value = m.clone();
        for i in 0..value.rows() {
            let s = c.as_slice()[i];
            value.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    /// Adds `b` (`p × c`) to `a` (`k·p × c`), repeating `b` every `p` rows.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let (m, t) = (self.value(a), self.value(b));
        assert_eq!(m.cols(), t.cols(), "add_tiled width mismatch");
        assert!(t.rows() > 0 && m.rows() % t.rows() == 0, "add_tiled period mismatch");
        let mut value = m.clone();
        for i in 0..value.rows() {
            let src = t.row(i % t.rows());
            for (x, y) in value.row_mut(i).iter_mut().zip(src) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddTiled(a, b), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let mut value = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a, inv_std), rg)
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize(a, norms), rg)
    }

    /// Column means, `n × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = Matrix::zeros(1, m.cols());
        for row in m.iter_rows() {
            for (o, x) in value.as_mut_slice().iter_mut().zip(row) {
                *o += x;
            }
        }
        let n = m.rows().max(1) as f64;
        value.as_mut_slice().iter_mut().for_each(|x| *x /= n);
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Means over consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let m = self.value(a);
        assert!(group > 0 && m.rows().is_multiple_of(group), "group_mean_rows: rows not divisible by group");
        let out_rows = m.rows() / group;
        let mut value = Matrix::zeros(out_rows, m.cols());
        for r in 0..m.rows() {
            let src = m.row(r);
            for (o, x) in value.row_mut(r / group).iter_mut().zip(src) {
                *o += x / group as f64;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::GroupMeanRows(a, group), rg)
    }

    /// Stride-2 average pooling along rows; an odd tail row is copied.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let value = avg_pool2_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::AvgPool2(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn select_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let value = self.value(a).select_rows(&indices);
        let rg = self.rg(a);
        self.push(value, Op::SelectRows(a, indices), rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats);
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(value, Op::ConcatRows(parts), rg)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats);
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(value, Op::ConcatCols(parts), rg)
    }

    /// Records a scalar computed outside the tape together with its
    /// gradient with respect to each input.
    pub fn scalar_op(&mut self, value: f64, local_grads: Vec<(Var, Matrix)>) -> Var {
        for (v, g) in &local_grads {
            assert_eq!(self.value(*v).shape(), g.shape(), "local gradient shape mismatch");
        }
        let rg = local_grads.iter().any(|(v, _)| self.rg(*v));
        self.push(Matrix::scalar(value), Op::Scalar(local_grads), rg)
    }

    /// Mean cross-entropy of `logits` rows against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logit row");
        let n = targets.len().max(1) as f64;
        let mut grad = Matrix::zeros(l.rows(), l.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let lse = crate::tensor::log_sum_exp(row);
            loss += lse - row[t];
            for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
                *g = ((row[c] - lse).exp() - f64::from(u8::from(c == t))) / n;
            }
        }
        self.scalar_op(loss / n, vec![(logits, grad)])
    }

    pub fn add_scalars(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Runs reverse-mode accumulation from the scalar `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        self.nodes[root.0].grad = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = self.local_backward(i, &op, &grad);
            // Restore so parameter leaves stay identifiable after backward.
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    fn local_backward(&self, i: usize, op: &Op, grad: &Matrix) -> Vec<(Var, Matrix)> {
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::new();
                if self.rg(*a) {
                    v.push((*a, grad.matmul_t(self.value(*b))));
                }
                if self.rg(*b) {
                    v.push((*b, self.value(*a).t_matmul(grad)));
                }
                v
            }
            Op::MatMulT(a, b) => {
                let mut v = Vec::new();
                if self.rg(*a) {
                    v.push((*a, grad.matmul(self.value(*b))));
                }
                if self.rg(*b) {
                    v.push((*b, grad.t_matmul(self.value(*a))));
                }
                v
            }
            Op::Transpose(a) => vec![(*a, grad.transpose())],
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Sub(a, b) => vec![(*a, grad.clone()), (*b, grad.scale(-1.0))],
            Op::Mul(a, b) => {
                vec![(*a, grad.zip_map(self.value(*b), |g, y| g * y)), (*b, grad.zip_map(self.value(*a), |g, x| g * x))]
            }
            Op::Scale(a, s) => vec![(*a, grad.scale(*s))],
            Op::AddRow(a, row) => {
                let mut rg = Matrix::zeros(1, grad.cols());
                for r in grad.iter_rows() {
                    for (o, g) in rg.as_mut_slice().iter_mut().zip(r) {
                        *o += g;
                    }
                }
                vec![(*a, grad.clone()), (*row, rg)]
            }
            Op::MulRow(a, row) => {
                let x = self.value(*a);
                let w = self.value(*row);
                let mut ga = grad.clone();
                let mut gw = Matrix::zeros(1, grad.cols());
                for r in 0..grad.rows() {
                    let (g, xr) = (grad.row(r), x.row(r));
                    for c in 0..grad.cols() {
                        gw.as_mut_slice()[c] += g[c] * xr[c];
                    }
                    for (o, wc) in ga.row_mut(r).iter_mut().zip(w.as_slice()) {
                        *o *= wc;
                    }
                }
                vec![(*a, ga), (*row, gw)]
            }
            Op::MulCol(a, col) => {
                let x = self.value(*a);
                let c = self.value(*col);
                let mut ga = grad.clone();
                let mut gc = Matrix::zeros(c.rows(), 1);
                for r in 0..grad.rows() {
                    gc.as_mut_slice()[r] = crate::tensor::dot(grad.row(r), x.row(r));
                    let s = c.as_slice()[r];
                    ga.row_mut(r).iter_mut().for_each(|g| *g *= s);
                }
                vec![(*a, ga), (*col, gc)]
            }
            Op::AddTiled(a, b) => {
                let p = self.value(*b).rows();
                let mut gb = Matrix::zeros(p, grad.cols());
                for r in 0..grad.rows() {
                    for (o, g) in gb.row_mut(r % p).iter_mut().zip(grad.row(r)) {
                        *o += g;
                    }
                }
                vec![(*a, grad.clone()), (*b, gb)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x.map(|x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                vec![(*a, grad.zip_map(&d, |g, d| g * d))]
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                vec![(*a, grad.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }))]
            }
            Op::Sigmoid(a) => vec![(*a, grad.zip_map(out, |g, y| g * y * (1.0 - y)))],
            Op::Tanh(a) => vec![(*a, grad.zip_map(out, |g, y| g * (1.0 - y * y)))],
            Op::SoftmaxRows(a) => {
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, g) = (out.row(r), grad.row(r));
                    let s = crate::tensor::dot(y, g);
                    for (o, (yy, gg)) in gx.row_mut(r).iter_mut().zip(y.iter().zip(g)) {
                        *o = yy * (gg - s);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm(a, inv_std) => {
                let n = out.cols() as f64;
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, g) = (out.row(r), grad.row(r));
                    let mean_g = g.iter().sum::<f64>() / n;
                    let mean_gy = crate::tensor::dot(g, y) / n;
                    for (o, (yy, gg)) in gx.row_mut(r).iter_mut().zip(y.iter().zip(g)) {
                        *o = inv_std[r] * (gg - mean_g - yy * mean_gy);
                    }
                }
                vec![(*a, gx)]
            }
            Op::L2Normalize(a, norms) => {
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, g) = (out.row(r), grad.row(r));
                    let s = crate::tensor::dot(y, g);
                    for (o, (yy, gg)) in gx.row_mut(r).iter_mut().zip(y.iter().zip(g)) {
                        *o = (gg - yy * s) / norms[r];
                    }
                }
                vec![(*a, gx)]
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let n = rows.max(1) as f64;
                let mut gx = Matrix::zeros(rows, grad.cols());
                for r in 0..rows {
                    for (o, g) in gx.row_mut(r).iter_mut().zip(grad.as_slice()) {
                        *o = g / n;
                    }
                }
                vec![(*a, gx)]
            }
            Op::GroupMeanRows(a, group) => {
                let rows = self.value(*a).rows();
                let mut gx = Matrix::zeros(rows, grad.cols());
                for r in 0..rows {
                    for (o, g) in gx.row_mut(r).iter_mut().zip(grad.row(r / group)) {
                        *o = g / *group as f64;
                    }
                }
                vec![(*a, gx)]
            }
            Op::AvgPool2(a) => {
                let rows = self.value(*a).rows();
                let mut gx = Matrix::zeros(rows, grad.cols());
                for r in 0..rows {
                    let j = r / 2;
                    let width = if 2 * j + 1 < rows { 0.5 } else { 1.0 };
                    for (o, g) in gx.row_mut(r).iter_mut().zip(grad.row(j)) {
                        *o = g * width;
                    }
                }
                vec![(*a, gx)]
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                vec![(*a, Matrix::filled(r, c, grad.item()))]
            }
            Op::SelectRows(a, indices) => {
                let src = self.value(*a);
                let mut gx = Matrix::zeros(src.rows(), src.cols());
                for (k, &idx) in indices.iter().enumerate() {
                    for (o, g) in gx.row_mut(idx).iter_mut().zip(grad.row(k)) {
                        *o += g;
                    }
                }
                vec![(*a, gx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).rows();
                        let g = grad.slice_rows(offset, offset + n);
                        offset += n;
                        (p, g)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = self.value(p).cols();
                        let mut g = Matrix::zeros(grad.rows(), w);
                        for r in 0..grad.rows() {
                            g.row_mut(r).copy_from_slice(&grad.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        (p, g)
                    })
                    .collect()
            }
            Op::Scalar(locals) => {
                let s = grad.item();
                locals.iter().map(|(v, g)| (*v, g.scale(s))).collect()
            }
        }
    }

    /// Gradients of every trainable parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> =
            self.params.iter().filter_map(|(&id, &v)| self.nodes[v.0].grad.as_ref().map(|g| (id, g.clone()))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Stride-2 row averaging used by the temporal pyramids.
pub fn avg_pool2_rows(m: &Matrix) -> Matrix {
    let rows = m.rows().div_ceil(2);
    let mut out = Matrix::zeros(rows, m.cols());
    for j in 0..rows {
        let a = m.row(2 * j);
        if 2 * j + 1 < m.rows() {
            let b = m.row(2 * j + 1);
            for (o, (x, y)) in out.row_mut(j).iter_mut().zip(a.iter().zip(b)) {
                *o = 0.5 * (x + y);
            }
        } else {
            out.row_mut(j).copy_from_slice(a);
        }
    }
    out
}
