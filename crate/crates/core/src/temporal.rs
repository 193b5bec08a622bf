//! Temporal feature pyramids, the anchor-free head trunk and the losses
//! shared by query grounding and moment detection.
//!
//! Positions are flattened level-major: every position of level 0, then
//! level 1, and so on. That order is also the ranking tie-break.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::SnippetFeatureTrack;
use crate::nn::{CrossAttention, LayerNorm, Linear, ParamId, ParamStore, Regularization, TransformerBlock};
use crate::segment::TemporalSegment;
use crate::tensor::{sigmoid, Matrix};
pub use crate::train::{run_phase, PhaseConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub features: Matrix,
    /// Seconds represented by each position.
    pub stamps: Vec<f64>,
    /// Regression unit of this level in seconds (`2^l · δ / fps`).
    pub scale_s: f64,
}

/// Stride-2 stamps: the midpoint of two parents, or the lone parent of an odd tail.
pub fn pool_stamps(prev: &[f64]) -> Vec<f64> {
    prev.chunks(2).map(|c| if c.len() == 2 { 0.5 * (c[0] + c[1]) } else { c[0] }).collect()
}

/// Stamps of every level; level 0 uses snippet centers.
pub fn level_stamps(track: &SnippetFeatureTrack, levels: usize) -> Vec<Vec<f64>> {
    let mut out = vec![(0..track.len()).map(|i| track.center_s(i)).collect::<Vec<_>>()];
    for _ in 1..levels {
        let next = pool_stamps(out.last().expect("level 0 exists"));
        out.push(next);
    }
    out
}

/// Level `l` has `ceil(N / 2^l)` positions obtained by stride-2 averaging.
pub fn build_pyramid(track: &SnippetFeatureTrack, levels: usize) -> Result<Vec<PyramidLevel>> {
    if track.is_empty() {
        return Err(Error::Empty(format!("track {} has no snippets", track.clip_id)));
    }
    if levels == 0 {
        return Err(Error::Config("a pyramid needs at least one level".into()));
    }
    let stamps = level_stamps(track, levels);
    let mut features = track.features.clone();
    let mut out = Vec::with_capacity(levels);
    for (l, stamps) in stamps.into_iter().enumerate() {
        if l > 0 {
            features = crate::autograd::avg_pool2_rows(&features);
        }
        out.push(PyramidLevel { features: features.clone(), stamps, scale_s: (1 << l) as f64 * track.stride_s() });
    }
    Ok(out)
}

/// Flattened per-position geometry of a pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub stamps: Vec<f64>,
    pub scales: Vec<f64>,
    pub level_sizes: Vec<usize>,
    pub duration_s: f64,
}

impl Geometry {
    pub fn new(track: &SnippetFeatureTrack, levels: usize, duration_s: f64) -> Self {
        let mut stamps = Vec::new();
        let mut scales = Vec::new();
        let mut level_sizes = Vec::new();
        for (l, st) in level_stamps(track, levels).into_iter().enumerate() {
            let scale = (1 << l) as f64 * track.stride_s();
            level_sizes.push(st.len());
            scales.extend(std::iter::repeat_n(scale, st.len()));
            stamps.extend(st);
        }
        Self { stamps, scales, level_sizes, duration_s }
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    /// `(level, index within level)` of flattened position `p`.
    pub fn locate(&self, mut p: usize) -> (usize, usize) {
        for (l, &n) in self.level_sizes.iter().enumerate() {
            if p < n {
                return (l, p);
            }
            p -= n;
        }
        panic!("position out of range");
    }
}

/// `[stamp − start_off, stamp + end_off]` clipped to `[0, duration]`.
pub fn decode_segment(stamp: f64, start_off: f64, end_off: f64, duration_s: f64) -> TemporalSegment {
    let start = (stamp - start_off.max(0.0)).clamp(0.0, duration_s);
    let end = (stamp + end_off.max(0.0)).clamp(start, duration_s);
    TemporalSegment::new(start, end)
}

/// Regression target of one position: class and distances to both boundaries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionTarget {
    pub class: usize,
    pub start_dist: f64,
    pub end_dist: f64,
}

/// A position is positive for the shortest ground-truth segment whose closed
/// interval contains its stamp. A segment that contains no stamp claims the
/// free position nearest to its center so that every segment is supervised.
pub fn assign_targets(stamps: &[f64], gts: &[(TemporalSegment, usize)]) -> Vec<Option<PositionTarget>> {
    let target = |c: f64, s: &TemporalSegment, class: usize| PositionTarget {
        class,
        start_dist: (c - s.start_s).max(0.0),
        end_dist: (s.end_s - c).max(0.0),
    };
    let mut out: Vec<Option<PositionTarget>> = stamps
        .iter()
        .map(|&c| {
            gts.iter()
                .filter(|(s, _)| s.start_s <= c && c <= s.end_s)
                .min_by(|a, b| a.0.length().total_cmp(&b.0.length()))
                .map(|(s, class)| target(c, s, *class))
        })
        .collect();
    for (s, class) in gts {
        if stamps.iter().any(|&c| s.start_s <= c && c <= s.end_s) {
            continue;
        }
        let nearest = (0..stamps.len())
            .filter(|&p| out[p].is_none())
            .min_by(|&a, &b| (stamps[a] - s.center()).abs().total_cmp(&(stamps[b] - s.center()).abs()));
        if let Some(p) = nearest {
            out[p] = Some(target(stamps[p], s, *class));
        }
    }
    out
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = −softplus(−x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Sigmoid focal loss summed over all entries, with optional per-row weights.
/// Returns the loss and its gradient with respect to `logits`.
pub fn sigmoid_focal_loss(
    logits: &Matrix,
    targets: &Matrix,
    alpha: f64,
    gamma: f64,
    row_weights: Option<&[f64]>,
) -> (f64, Matrix) {
    assert_eq!(logits.shape(), targets.shape(), "focal loss shape mismatch");
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for r in 0..logits.rows() {
        let w = row_weights.map_or(1.0, |ws| ws[r]);
        for c in 0..logits.cols() {
            let x = logits[(r, c)];
            let p = sigmoid(x);
            let q = 1.0 - p;
            let (l, d) = if targets[(r, c)] > 0.5 {
                let log_p = log_sigmoid(x);
                (-alpha * q.powf(gamma) * log_p, alpha * q.powf(gamma) * (gamma * p * log_p - q))
            } else {
                let log_q = log_sigmoid(-x);
                (-(1.0 - alpha) * p.powf(gamma) * log_q, -(1.0 - alpha) * p.powf(gamma) * (gamma * q * log_q - p))
            };
            loss += w * l;
            grad[(r, c)] = w * d;
        }
    }
    (loss, grad)
}

/// Summed `w·(1 − IoU)` between predicted and target boundary distances of
/// segments that share an anchor. Returns the loss and its gradient with
/// respect to `pred` (`n × 2`).
pub fn offset_iou_loss(pred: &Matrix, target: &Matrix, weights: &[f64]) -> (f64, Matrix) {
    assert_eq!(pred.shape(), target.shape(), "iou loss shape mismatch");
    let mut grad = Matrix::zeros(pred.rows(), 2);
    let mut loss = 0.0;
    for r in 0..pred.rows() {
        let (ps, pe) = (pred[(r, 0)], pred[(r, 1)]);
        let (ts, te) = (target[(r, 0)], target[(r, 1)]);
        let inter = ps.min(ts) + pe.min(te);
        let union = ps.max(ts) + pe.max(te) + 1e-9;
        let w = weights[r];
        loss += w * (1.0 - inter / union);
        // d(1 − I/U) = −(dI·U − I·dU) / U²
        let d = |p: f64, t: f64| {
            let di = if p < t { 1.0 } else { 0.0 };
            let du = if p > t { 1.0 } else { 0.0 };
            -(di * union - inter * du) / (union * union)
        };
        grad[(r, 0)] = w * d(ps, ts);
        grad[(r, 1)] = w * d(pe, te);
    }
    (loss, grad)
}

/// Optional conditioning of the trunk on a token sequence (a text query).
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub token_embed: ParamId,
    pub pool: Linear,
    pub gamma: Linear,
    pub beta: Linear,
    pub cross: Vec<CrossAttention>,
}

/// Input projection, optional query fusion and one transformer block per
/// pyramid level.
#[derive(Clone, Debug)]
pub struct TemporalTrunk {
    pub input: Linear,
    pub input_norm: LayerNorm,
    pub conditioning: Option<Conditioning>,
    pub blocks: Vec<TransformerBlock>,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrunkShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub levels: usize,
    /// Vocabulary size of the conditioning tokens; `None` for no conditioning.
    pub condition_vocab: Option<usize>,
    pub cross_modal: bool,
}

impl TemporalTrunk {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, shape: TrunkShape, rng: &mut R) -> Self {
        let h = shape.hidden;
        let conditioning = shape.condition_vocab.map(|vocab| Conditioning {
            token_embed: store.add(format!("{name}.query.token_embed"), Matrix::randn(vocab, h, 0.5, rng)),
            pool: Linear::new(store, &format!("{name}.query.pool"), h, h, rng),
            gamma: Linear::new(store, &format!("{name}.query.gamma"), h, h, rng),
            beta: Linear::new(store, &format!("{name}.query.beta"), h, h, rng),
            cross: if shape.cross_modal {
                (0..shape.levels).map(|l| CrossAttention::new(store, &format!("{name}.cross.{l}"), h, rng)).collect()
            } else {
                Vec::new()
            },
        });
        Self {
            input: Linear::new(store, &format!("{name}.input"), shape.input_dim, h, rng),
            input_norm: LayerNorm::new(store, &format!("{name}.input_norm"), h),
            conditioning,
            blocks: (0..shape.levels)
                .map(|l| TransformerBlock::new(store, &format!("{name}.level.{l}"), h, rng))
                .collect(),
            hidden: h,
        }
    }

    /// Hidden states of every level concatenated level-major.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        features: &Matrix,
        tokens: Option<&[usize]>,
        reg: Regularization,
        rng: &mut R,
    ) -> Var {
        let x = g.constant(features.clone());
        let x = self.input.forward(g, x);
        let x = self.input_norm.forward(g, x);
        let mut x = g.gelu(x);
        let mut context = None;
        if let (Some(c), Some(tokens)) = (&self.conditioning, tokens) {
            let table = g.param(c.token_embed);
            let tok = g.select_rows(table, tokens.to_vec());
            let pooled = g.mean_rows(tok);
            let q = c.pool.forward(g, pooled);
            let q = g.gelu(q);
            let gamma = c.gamma.forward(g, q);
            let ones = g.constant(Matrix::filled(1, self.hidden, 1.0));
            let gain = g.add(gamma, ones);
            let beta = c.beta.forward(g, q);
            let y = g.mul_row(x, gain);
            x = g.add_row(y, beta);
            context = Some(tok);
        }
        let mut levels = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                x = g.avg_pool2(x);
            }
            if let (Some(c), Some(ctx)) = (&self.conditioning, context) {
                if let Some(cross) = c.cross.get(l) {
                    let h = cross.forward(g, x, ctx);
                    x = g.add(x, h);
                }
            }
            x = block.forward(g, x, None, reg, rng);
            levels.push(x);
        }
        g.concat_rows(levels)
    }
}

/// Classification, boundary regression and optional significance heads.
#[derive(Clone, Copy, Debug)]
pub struct DetectionHeads {
    pub cls: Linear,
    pub reg: Linear,
    pub significance: Option<Linear>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub logits: Var,
    /// Boundary distances in seconds (`P × 2`), unclamped.
    pub offsets: Var,
    /// Significance logits (`P × 1`) when the head exists.
    pub significance: Option<Var>,
}

impl DetectionHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        classes: usize,
        significance: bool,
        rng: &mut R,
    ) -> Self {
        let cls = Linear::new(store, &format!("{name}.cls"), hidden, classes, rng);
        // prior foreground probability 0.1
        *store.value_mut(cls.bias) = Matrix::filled(1, classes, -(9.0f64).ln());
        let reg = Linear::new(store, &format!("{name}.reg"), hidden, 2, rng);
        *store.value_mut(reg.bias) = Matrix::filled(1, 2, 0.5);
        let significance = significance.then(|| Linear::new(store, &format!("{name}.sig"), hidden, 1, rng));
        Self { cls, reg, significance }
    }

    pub fn forward(&self, g: &mut Graph, hidden: Var, geometry: &Geometry) -> HeadVars {
        let logits = self.cls.forward(g, hidden);
        // no rectifier here: a negative distance still receives gradient from
        // the IoU loss, and decoding clamps it to zero
        let raw = self.reg.forward(g, hidden);
        let scale = g.constant(Matrix::from_vec(geometry.len(), 1, geometry.scales.clone()));
        let offsets = g.mul_col(raw, scale);
        let significance = self.significance.map(|s| s.forward(g, hidden));
        HeadVars { logits, offsets, significance }
    }
}

/// Weights of the detection objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub regression: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { focal_alpha: 0.25, focal_gamma: 2.0, regression: 1.0 }
    }
}

/// Focal classification over every position plus `1 − IoU` regression on
/// positive positions, both normalized by the positive count. With a
/// significance head, each position's terms are scaled by its detached
/// weight `w = σ(s)` and `s` is fit by binary cross-entropy to "inside a
/// ground-truth segment". Returns the scalar loss node.
pub fn detection_loss(
    g: &mut Graph,
    out: &HeadVars,
    geometry: &Geometry,
    gts: &[(TemporalSegment, usize)],
    weights: LossWeights,
) -> Var {
    let targets = assign_targets(&geometry.stamps, gts);
    let p = geometry.len();
    let classes = g.value(out.logits).cols();
    let mut cls_target = Matrix::zeros(p, classes);
    let mut inside = Matrix::zeros(p, 1);
    let mut pos = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            cls_target[(i, t.class)] = 1.0;
            inside[(i, 0)] = 1.0;
            pos.push(i);
        }
    }
    let row_w: Vec<f64> = match out.significance {
        Some(s) => g.value(s).as_slice().iter().map(|&x| sigmoid(x)).collect(),
        None => vec![1.0; p],
    };
    let norm = pos.len().max(1) as f64;
    let (focal, d_logits) =
        sigmoid_focal_loss(g.value(out.logits), &cls_target, weights.focal_alpha, weights.focal_gamma, Some(&row_w));
    let offsets = g.value(out.offsets);
    let pred = offsets.select_rows(&pos);
    let tgt =
        Matrix::from_vec(pos.len(), 2, targets.iter().flatten().flat_map(|t| [t.start_dist, t.end_dist]).collect());
    let pos_w: Vec<f64> = pos.iter().map(|&i| row_w[i]).collect();
    let (iou, d_pos) = offset_iou_loss(&pred, &tgt, &pos_w);
    let mut d_offsets = Matrix::zeros(p, 2);
    for (k, &i) in pos.iter().enumerate() {
        d_offsets.row_mut(i).copy_from_slice(d_pos.row(k));
    }
    let mut loss = (focal + weights.regression * iou) / norm;
    let mut grads =
        vec![(out.logits, d_logits.scale(1.0 / norm)), (out.offsets, d_offsets.scale(weights.regression / norm))];
    if let Some(s) = out.significance {
        // binary cross-entropy is twice the focal loss at α = ½, γ = 0
        let (bce, d_s) = sigmoid_focal_loss(g.value(s), &inside, 0.5, 0.0, None);
        loss += 2.0 * bce / p as f64;
        grads.push((s, d_s.scale(2.0 / p as f64)));
    }
    g.scalar_op(loss, grads)
}

/// Evaluated head outputs of one track with their geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValues {
    pub geometry: Geometry,
    /// Classification logits (`P × C`).
    pub logits: Matrix,
    /// Boundary distances in seconds (`P × 2`), unclamped.
    pub offsets: Matrix,
    /// Per-position significance weight in `[0, 1]`; `None` means `w ≡ 1`.
    pub significance: Option<Vec<f64>>,
}

impl HeadValues {
    pub fn read(g: &Graph, out: &HeadVars, geometry: Geometry) -> Self {
        Self {
            geometry,
            logits: g.value(out.logits).clone(),
            offsets: g.value(out.offsets).clone(),
            significance: out.significance.map(|s| g.value(s).as_slice().iter().map(|&x| sigmoid(x)).collect()),
        }
    }

    /// Every position as a scored candidate of `class`, in position order.
    pub fn candidates(&self, class: usize) -> Vec<TemporalSegment> {
        (0..self.geometry.len())
            .map(|p| {
                let w = self.significance.as_ref().map_or(1.0, |s| s[p]);
                let mut seg = decode_segment(
                    self.geometry.stamps[p],
                    self.offsets[(p, 0)],
                    self.offsets[(p, 1)],
                    self.geometry.duration_s,
                );
                seg.score = Some(sigmoid(self.logits[(p, class)]) * w);
                seg.label = Some(class);
                seg
            })
            .collect()
    }
}
