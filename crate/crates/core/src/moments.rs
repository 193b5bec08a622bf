//! Per-category temporal moment detection: classification and boundary
//! heads with a significance gate, soft-NMS decoding, average mAP and logit
//! ensembling.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{restore_params, Checkpoint, TrainingState};
use crate::corpus::MomentAnnotation;
use crate::ensemble::{average_logits, LogitBundle};
use crate::error::{Error, Result};
use crate::features::SnippetFeatureTrack;
use crate::metrics::{interpolated_ap, tiou};
use crate::nn::{ParamStore, Regularization};
use crate::rng::stream;
use crate::segment::TemporalSegment;
use crate::temporal::{
    detection_loss, run_phase, DetectionHeads, Geometry, HeadValues, LossWeights, PhaseConfig, TemporalTrunk,
    TrunkShape,
};
use crate::tensor::Matrix;

pub const CHECKPOINT_KIND: &str = "moments";
pub const MAP_TIOUS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MomentsConfig {
    pub levels: usize,
    pub hidden: usize,
    /// Learned per-position significance gate; `false` fixes `w ≡ 1`.
    pub significance: bool,
    pub phase: PhaseConfig,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub regularization: Regularization,
    pub nms_sigma: f64,
    pub score_floor: f64,
    /// Candidates kept per (clip, category) after soft-NMS.
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            hidden: 32,
            significance: true,
            phase: PhaseConfig::new(2, 30, 3, 1e-3),
            weight_decay: 0.05,
            loss: LossWeights::default(),
            regularization: Regularization::default(),
            nms_sigma: 0.5,
            score_floor: 1e-3,
            max_candidates: 20,
            seed: 0,
        }
    }
}

impl MomentsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.hidden == 0 || self.max_candidates == 0 {
            return Err(Error::Config("moments: levels, hidden and max_candidates must be positive".into()));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(Error::Config("moments: nms_sigma must be positive".into()));
        }
        self.phase.validate("moments")
    }
}

/// Raw head outputs of one clip plus the decoded candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub clip_id: String,
    pub heads: HeadValues,
    /// Exhaustive scored candidates per category, in position order, before NMS.
    pub candidates: Vec<Vec<TemporalSegment>>,
}

impl DetectionOutput {
    pub fn from_heads(clip_id: impl Into<String>, heads: HeadValues) -> Self {
        let candidates = (0..heads.logits.cols()).map(|c| heads.candidates(c)).collect();
        Self { clip_id: clip_id.into(), heads, candidates }
    }

    pub fn num_classes(&self) -> usize {
        self.heads.logits.cols()
    }

    /// Soft-NMS per category, keeping at most `max` segments each.
    pub fn predictions(&self, sigma: f64, score_floor: f64, max: usize) -> Result<Vec<MomentPrediction>> {
        let mut out = Vec::new();
        for (c, cands) in self.candidates.iter().enumerate() {
            let mut kept = soft_nms(cands, sigma, score_floor)?;
            kept.truncate(max);
            if !kept.is_empty() {
                out.push(MomentPrediction { clip_id: self.clip_id.clone(), category_id: c, segments: kept });
            }
        }
        Ok(out)
    }
}

/// Ranked segments of one (clip, category); the prediction file record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPrediction {
    pub clip_id: String,
    pub category_id: usize,
    pub segments: Vec<TemporalSegment>,
}

#[derive(Serialize, Deserialize)]
struct ModelSpec {
    feature_dim: usize,
    num_classes: usize,
    config: MomentsConfig,
}

#[derive(Clone, Debug)]
pub struct MomentModel {
    config: MomentsConfig,
    feature_dim: usize,
    num_classes: usize,
    store: ParamStore,
    trunk: TemporalTrunk,
    heads: DetectionHeads,
}

impl MomentModel {
    pub fn new(feature_dim: usize, num_classes: usize, config: MomentsConfig) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config("moments: feature_dim and num_classes must be positive".into()));
        }
        let mut rng = stream(config.seed, "moments.init", 0);
        let mut store = ParamStore::new();
        let shape = TrunkShape {
            input_dim: feature_dim,
            hidden: config.hidden,
            levels: config.levels,
            condition_vocab: None,
            cross_modal: false,
        };
        let trunk = TemporalTrunk::new(&mut store, "moments", shape, &mut rng);
        let heads =
            DetectionHeads::new(&mut store, "moments.head", config.hidden, num_classes, config.significance, &mut rng);
        Ok(Self { config, feature_dim, num_classes, store, trunk, heads })
    }

    pub fn config(&self) -> &MomentsConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Head parameters, exposed so tests can zero the localization branch.
    pub fn heads(&self) -> &DetectionHeads {
        &self.heads
    }

    fn check_track(&self, track: &SnippetFeatureTrack) -> Result<()> {
        if track.is_empty() {
            return Err(Error::Empty(format!("track {} has no snippets", track.clip_id)));
        }
        if track.dim() != self.feature_dim {
            return Err(Error::Shape(format!("track dim {} but model expects {}", track.dim(), self.feature_dim)));
        }
        Ok(())
    }

    pub fn detect_moments(&self, track: &SnippetFeatureTrack, duration_s: f64) -> Result<DetectionOutput> {
        self.check_track(track)?;
        let mut g = Graph::with_params(&self.store, false);
        let mut rng = stream(self.config.seed, "moments.eval", 0);
        let hidden = self.trunk.forward(&mut g, &track.features, None, Regularization::default(), &mut rng);
        let geometry = Geometry::new(track, self.config.levels, duration_s);
        let out = self.heads.forward(&mut g, hidden, &geometry);
        Ok(DetectionOutput::from_heads(track.clip_id.clone(), HeadValues::read(&g, &out, geometry)))
    }

    pub fn to_checkpoint(&self, state: TrainingState) -> Checkpoint {
        let spec =
            ModelSpec { feature_dim: self.feature_dim, num_classes: self.num_classes, config: self.config.clone() };
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(spec).expect("config serializes"),
            params: self.store.clone(),
            state,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let spec: ModelSpec = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(spec.feature_dim, spec.num_classes, spec.config)?;
        restore_params(&mut model.store, &ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, state: TrainingState) -> Result<()> {
        self.to_checkpoint(state).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl PartialEq for MomentModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.feature_dim == other.feature_dim
            && self.num_classes == other.num_classes
            && self.store == other.store
    }
}

#[derive(Clone, Debug)]
pub struct MomentsOutcome {
    pub model: MomentModel,
    pub state: TrainingState,
}

struct ClipItem<'a> {
    track: &'a SnippetFeatureTrack,
    gts: Vec<(TemporalSegment, usize)>,
    duration_s: f64,
}

fn clip_items<'a>(annotations: &[MomentAnnotation], tracks: &'a [SnippetFeatureTrack]) -> Result<Vec<ClipItem<'a>>> {
    let index: HashMap<&str, &SnippetFeatureTrack> = tracks.iter().map(|t| (t.clip_id.as_str(), t)).collect();
    let mut grouped: BTreeMap<&str, ClipItem<'a>> = BTreeMap::new();
    for ann in annotations {
        let track = *index
            .get(ann.clip_id.as_str())
            .ok_or_else(|| Error::Invariant(format!("no feature track for clip {}", ann.clip_id)))?;
        let item = grouped.entry(ann.clip_id.as_str()).or_insert(ClipItem {
            track,
            gts: Vec::new(),
            duration_s: ann.duration_s,
        });
        for s in &ann.segments {
            s.validate()?;
            item.gts.push((*s, ann.category_id));
        }
    }
    Ok(grouped.into_values().collect())
}

/// Trains a fresh model on every annotated clip.
pub fn train_moments(
    annotations: &[MomentAnnotation],
    tracks: &[SnippetFeatureTrack],
    num_classes: usize,
    cfg: &MomentsConfig,
) -> Result<MomentsOutcome> {
    let dim = tracks.first().ok_or(Error::EmptyCorpus)?.dim();
    let init = MomentModel::new(dim, num_classes, cfg.clone())?;
    train_moments_from(init, annotations, tracks)
}

/// Continues training `model` with its own config.
pub fn train_moments_from(
    mut model: MomentModel,
    annotations: &[MomentAnnotation],
    tracks: &[SnippetFeatureTrack],
) -> Result<MomentsOutcome> {
    if let Some(a) = annotations.iter().find(|a| a.category_id >= model.num_classes) {
        return Err(Error::LabelOutOfRange { label: a.category_id, classes: model.num_classes });
    }
    let items = clip_items(annotations, tracks)?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for item in &items {
        model.check_track(item.track)?;
    }
    let cfg = model.config.clone();
    let (trunk, heads) = (model.trunk.clone(), model.heads);
    let mut state = TrainingState::default();
    run_phase(
        &mut model.store,
        &items,
        cfg.phase,
        cfg.weight_decay,
        cfg.seed,
        "moments",
        &mut state,
        |store, item, rng| {
            let mut g = Graph::with_params(store, true);
            let hidden = trunk.forward(&mut g, &item.track.features, None, cfg.regularization, rng);
            let geometry = Geometry::new(item.track, cfg.levels, item.duration_s);
            let out = heads.forward(&mut g, hidden, &geometry);
            let root = detection_loss(&mut g, &out, &geometry, &item.gts, cfg.loss);
            let loss = g.value(root).item();
            g.backward(root);
            Ok((loss, g.param_grads()))
        },
    )?;
    Ok(MomentsOutcome { model, state })
}

/// Detections for every track, decoded and suppressed with the model config.
pub fn predict_moments(
    model: &MomentModel,
    tracks: &[SnippetFeatureTrack],
    durations: &HashMap<String, f64>,
) -> Result<Vec<MomentPrediction>> {
    let cfg = model.config();
    let per_clip: Vec<Vec<MomentPrediction>> = tracks
        .par_iter()
        .map(|t| {
            let duration = *durations
                .get(&t.clip_id)
                .ok_or_else(|| Error::Invariant(format!("unknown duration for clip {}", t.clip_id)))?;
            model.detect_moments(t, duration)?.predictions(cfg.nms_sigma, cfg.score_floor, cfg.max_candidates)
        })
        .collect::<Result<_>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// Gaussian soft-NMS. Repeatedly selects the highest-scoring candidate
/// (lowest index on ties) and multiplies every remaining score by
/// `exp(−tIoU² / sigma)` against it. Selection stops once the best score is
/// below `score_floor`; the output is therefore sorted by descending score.
pub fn soft_nms(candidates: &[TemporalSegment], sigma: f64, score_floor: f64) -> Result<Vec<TemporalSegment>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("soft-NMS sigma must be positive, got {sigma}")));
    }
    let mut remaining: Vec<TemporalSegment> = candidates.to_vec();
    let mut out = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if remaining[i].score_or_zero() > remaining[best].score_or_zero() {
                best = i;
            }
        }
        let sel = remaining.remove(best);
        if sel.score_or_zero() < score_floor {
            break;
        }
        for r in remaining.iter_mut() {
            let o = tiou(r, &sel);
            r.score = Some(r.score_or_zero() * (-o * o / sigma).exp());
        }
        out.push(sel);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub tious: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub average_map: f64,
    pub r1_at_05: f64,
    /// Predictions dropped for an out-of-range category id.
    pub ignored_predictions: usize,
}

fn by_score_desc(segs: &mut [(usize, TemporalSegment)]) {
    segs.sort_by(|a, b| b.1.score_or_zero().total_cmp(&a.1.score_or_zero()));
}

/// Greedy one-to-one matching of ranked predictions against the unmatched
/// ground truth of the same clip; each prediction takes its highest-tIoU
/// candidate (lowest index on ties).
fn greedy_tp(ranked: &[(usize, TemporalSegment)], gts: &[Vec<TemporalSegment>], t: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|(clip, seg)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*clip].iter().enumerate() {
                if used[*clip][j] {
                    continue;
                }
                let o = tiou(seg, g);
                if o >= t && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[*clip][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Detection mAP per tIoU threshold over categories with at least one
/// ground-truth segment, their mean, and R1@0.5: for every (clip, category)
/// with `n` ground-truth segments, the fraction of those segments matched by
/// the top `n` predictions at tIoU ≥ 0.5.
pub fn average_map(
    predictions: &[MomentPrediction],
    gt: &[MomentAnnotation],
    num_classes: usize,
    tious: &[f64],
) -> Result<MapReport> {
    let mut clip_ids: Vec<&str> = gt.iter().map(|a| a.clip_id.as_str()).collect();
    clip_ids.sort_unstable();
    clip_ids.dedup();
    let clip_index: HashMap<&str, usize> = clip_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    // gts[c][clip] and preds[c] as (clip, segment) pairs
    let mut gts: Vec<Vec<Vec<TemporalSegment>>> = vec![vec![Vec::new(); clip_ids.len()]; num_classes];
    for a in gt {
        if a.category_id >= num_classes {
            return Err(Error::LabelOutOfRange { label: a.category_id, classes: num_classes });
        }
        for s in &a.segments {
            s.validate()?;
        }
        gts[a.category_id][clip_index[a.clip_id.as_str()]].extend(a.segments.iter().copied());
    }
    let mut preds: Vec<Vec<(usize, TemporalSegment)>> = vec![Vec::new(); num_classes];
    let mut grouped: HashMap<(usize, usize), Vec<TemporalSegment>> = HashMap::new();
    let mut ignored = 0;
    for p in predictions {
        for s in &p.segments {
            s.validate()?;
        }
        if p.category_id >= num_classes {
            ignored += p.segments.len();
            continue;
        }
        // predictions on clips without ground truth are false positives
        let clip = clip_index.get(p.clip_id.as_str()).copied();
        for s in &p.segments {
            match clip {
                Some(c) => {
                    preds[p.category_id].push((c, *s));
                    grouped.entry((c, p.category_id)).or_default().push(*s);
                }
                None => preds[p.category_id].push((usize::MAX, *s)),
            }
        }
    }
    if ignored > 0 {
        log::warn!("average_map ignored {ignored} predictions with unknown category ids");
    }
    for p in preds.iter_mut() {
        by_score_desc(p);
    }

    let active: Vec<usize> = (0..num_classes).filter(|&c| gts[c].iter().any(|g| !g.is_empty())).collect();
    let per_threshold: Vec<f64> = tious
        .iter()
        .map(|&t| {
            if active.is_empty() {
                return 0.0;
            }
            let sum: f64 = active
                .iter()
                .map(|&c| {
                    let tp = match_with_unknown(&preds[c], &gts[c], t);
                    let n: usize = gts[c].iter().map(Vec::len).sum();
                    interpolated_ap(&tp, n)
                })
                .sum();
            sum / active.len() as f64
        })
        .collect();
    let average =
        if per_threshold.is_empty() { 0.0 } else { per_threshold.iter().sum::<f64>() / per_threshold.len() as f64 };

    let mut hits = 0usize;
    let mut total = 0usize;
    for (c, per_clip) in gts.iter().enumerate() {
        for (k, g) in per_clip.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            total += g.len();
            let mut ranked: Vec<(usize, TemporalSegment)> =
                grouped.get(&(k, c)).map(|v| v.iter().map(|&s| (0, s)).collect()).unwrap_or_default();
            by_score_desc(&mut ranked);
            ranked.truncate(g.len());
            hits += greedy_tp(&ranked, std::slice::from_ref(g), 0.5).iter().filter(|&&x| x).count();
        }
    }
    let r1 = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok(MapReport {
        tious: tious.to_vec(),
        per_threshold,
        average_map: average,
        r1_at_05: r1,
        ignored_predictions: ignored,
    })
}

/// [`greedy_tp`] where predictions on clips without ground truth
/// (`usize::MAX`) are always false positives.
fn match_with_unknown(ranked: &[(usize, TemporalSegment)], gts: &[Vec<TemporalSegment>], t: f64) -> Vec<bool> {
    let mut known = Vec::with_capacity(ranked.len());
    let mut slots = Vec::with_capacity(ranked.len());
    for (i, (clip, seg)) in ranked.iter().enumerate() {
        if *clip != usize::MAX {
            known.push((*clip, *seg));
            slots.push(i);
        }
    }
    let tp_known = greedy_tp(&known, gts, t);
    let mut tp = vec![false; ranked.len()];
    for (k, i) in slots.into_iter().enumerate() {
        tp[i] = tp_known[k];
    }
    tp
}

/// Elementwise mean of logits, offsets and significance weights of aligned
/// outputs, decoded again.
pub fn ensemble_detections(outputs: &[DetectionOutput]) -> Result<DetectionOutput> {
    let first = outputs.first().ok_or_else(|| Error::Empty("no detection outputs to ensemble".into()))?;
    for o in &outputs[1..] {
        if o.heads.geometry != first.heads.geometry
            || o.heads.logits.shape() != first.heads.logits.shape()
            || o.heads.significance.is_some() != first.heads.significance.is_some()
        {
            return Err(Error::Shape(format!(
                "detection outputs of {} and {} are not aligned",
                first.clip_id, o.clip_id
            )));
        }
    }
    let geometries: Vec<&Geometry> = outputs.iter().map(|o| &o.heads.geometry).collect();
    let mean = |pick: &dyn Fn(&DetectionOutput) -> Matrix| -> Result<Matrix> {
        let bundle = LogitBundle::with_geometry(outputs.iter().map(pick).collect(), &geometries)?;
        Ok(average_logits(&bundle))
    };
    let logits = mean(&|o| o.heads.logits.clone())?;
    let offsets = mean(&|o| o.heads.offsets.clone())?;
    let significance = match first.heads.significance {
        Some(_) => {
            let col = |o: &DetectionOutput| {
                let s = o.heads.significance.as_ref().expect("checked above");
                Matrix::from_vec(s.len(), 1, s.clone())
            };
            Some(mean(&col)?.into_vec())
        }
        None => None,
    };
    let heads = HeadValues { geometry: first.heads.geometry.clone(), logits, offsets, significance };
    Ok(DetectionOutput::from_heads(first.clip_id.clone(), heads))
}
