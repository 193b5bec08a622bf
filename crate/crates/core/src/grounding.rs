//! Natural-language temporal grounding over snippet feature tracks.
//!
//! A query-conditioned multiscale encoder scores every pyramid position as
//! foreground and regresses its distances to both answer boundaries. Training
//! runs an optional pretraining phase on a larger auto-generated query set
//! before fine-tuning.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{restore_params, Checkpoint, TrainingState};
use crate::corpus::vocab::{Vocabulary, PAD};
use crate::corpus::GroundingAnnotation;
use crate::error::{Error, Result};
use crate::features::SnippetFeatureTrack;
use crate::metrics::tiou;
use crate::moments::soft_nms;
use crate::nn::{ParamStore, Regularization};
use crate::rng::stream;
use crate::segment::TemporalSegment;
use crate::temporal::{
    detection_loss, run_phase, DetectionHeads, Geometry, HeadValues, LossWeights, PhaseConfig, TemporalTrunk,
    TrunkShape,
};

pub const CHECKPOINT_KIND: &str = "grounding";
pub const RECALL_KS: [usize; 2] = [1, 5];
pub const RECALL_TIOUS: [f64; 2] = [0.3, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingQuery {
    pub query_id: String,
    pub clip_id: String,
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<TemporalSegment>,
    pub duration_s: f64,
}

impl GroundingQuery {
    pub fn validate(&self) -> Result<()> {
        if let Some(gt) = &self.gt {
            gt.validate()?;
            if gt.end_s > self.duration_s + 1e-9 {
                return Err(Error::InvalidSegment { start: gt.start_s, end: gt.end_s });
            }
        }
        Ok(())
    }

    fn require_gt(&self) -> Result<TemporalSegment> {
        self.gt.ok_or_else(|| Error::Invariant(format!("query {} has no ground truth", self.query_id)))
    }
}

impl From<&GroundingAnnotation> for GroundingQuery {
    fn from(a: &GroundingAnnotation) -> Self {
        Self {
            query_id: a.query_id.clone(),
            clip_id: a.clip_id.clone(),
            query_text: a.query_text.clone(),
            gt: Some(a.gt()),
            duration_s: a.duration_s,
        }
    }
}

pub fn queries_from_annotations(annotations: &[GroundingAnnotation]) -> Vec<GroundingQuery> {
    annotations.iter().map(GroundingQuery::from).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub levels: usize,
    pub hidden: usize,
    /// Cross-attention from every pyramid level onto the query tokens.
    pub cross_modal: bool,
    pub top_k: usize,
    /// Soft-NMS over the ranked candidates; `None` keeps raw ranking.
    pub nms_sigma: Option<f64>,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub regularization: Regularization,
    pub seed: u64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            hidden: 32,
            cross_modal: false,
            top_k: 5,
            nms_sigma: Some(0.5),
            pretrain: PhaseConfig::new(8, 10, 4, 2e-4),
            finetune: PhaseConfig::new(2, 10, 4, 5e-5),
            weight_decay: 0.05,
            loss: LossWeights::default(),
            regularization: Regularization::default(),
            seed: 0,
        }
    }
}

impl GroundingConfig {
    /// Step-grounding variant: batch 8 with dropout and drop-path 0.2.
    pub fn step_grounding() -> Self {
        let base = Self::default();
        Self {
            pretrain: PhaseConfig { batch: 8, ..base.pretrain },
            finetune: PhaseConfig { batch: 8, ..base.finetune },
            regularization: Regularization { dropout: 0.2, drop_path: 0.2 },
            ..base
        }
    }

    /// Same two-phase shape with epochs and peak learning rates multiplied,
    /// for corpora far smaller than the published schedule assumes.
    pub fn scaled(&self, epoch_scale: usize, lr_scale: f64) -> Self {
        let scale = |p: PhaseConfig| PhaseConfig {
            epochs: p.epochs * epoch_scale,
            warmup_epochs: p.warmup_epochs * epoch_scale,
            max_lr: p.max_lr * lr_scale,
            ..p
        };
        Self { pretrain: scale(self.pretrain), finetune: scale(self.finetune), ..self.clone() }
    }

    /// Desk-scale profile used by the pipeline.
    pub fn desk() -> Self {
        Self::default().scaled(3, 20.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.hidden == 0 || self.top_k == 0 {
            return Err(Error::Config("grounding: levels, hidden and top_k must be positive".into()));
        }
        if self.nms_sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("grounding: nms_sigma must be positive".into()));
        }
        self.pretrain.validate("grounding pretrain")?;
        self.finetune.validate("grounding finetune")
    }
}

/// Query token ids; an empty query becomes a single padding token.
pub fn query_tokens(text: &str) -> Vec<usize> {
    let ids = Vocabulary::global().tokenize(text);
    if ids.is_empty() {
        vec![PAD]
    } else {
        ids
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSpec {
    feature_dim: usize,
    config: GroundingConfig,
}

#[derive(Clone, Debug)]
pub struct GroundingModel {
    config: GroundingConfig,
    feature_dim: usize,
    store: ParamStore,
    trunk: TemporalTrunk,
    heads: DetectionHeads,
}

impl GroundingModel {
    pub fn new(feature_dim: usize, config: GroundingConfig) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("grounding: feature_dim must be positive".into()));
        }
        let mut rng = stream(config.seed, "grounding.init", 0);
        let mut store = ParamStore::new();
        let shape = TrunkShape {
            input_dim: feature_dim,
            hidden: config.hidden,
            levels: config.levels,
            condition_vocab: Some(Vocabulary::global().len()),
            cross_modal: config.cross_modal,
        };
        let trunk = TemporalTrunk::new(&mut store, "grounding", shape, &mut rng);
        let heads = DetectionHeads::new(&mut store, "grounding.head", config.hidden, 1, false, &mut rng);
        Ok(Self { config, feature_dim, store, trunk, heads })
    }

    pub fn config(&self) -> &GroundingConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

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

    /// Per-position head outputs for one query.
    pub fn head_values(&self, track: &SnippetFeatureTrack, query_text: &str, duration_s: f64) -> Result<HeadValues> {
        self.check_track(track)?;
        let mut g = Graph::with_params(&self.store, false);
        let mut rng = stream(self.config.seed, "grounding.eval", 0);
        let tokens = query_tokens(query_text);
        let hidden = self.trunk.forward(&mut g, &track.features, Some(&tokens), Regularization::default(), &mut rng);
        let geometry = Geometry::new(track, self.config.levels, duration_s);
        let out = self.heads.forward(&mut g, hidden, &geometry);
        Ok(HeadValues::read(&g, &out, geometry))
    }

    /// Up to `top_k` segments by descending score; ties keep (level,
    /// position) order.
    pub fn ground_query(
        &self,
        track: &SnippetFeatureTrack,
        query_text: &str,
        duration_s: f64,
    ) -> Result<Vec<TemporalSegment>> {
        let mut cands = self.head_values(track, query_text, duration_s)?.candidates(0);
        for c in cands.iter_mut() {
            c.label = None;
        }
        let mut ranked = match self.config.nms_sigma {
            Some(sigma) => soft_nms(&cands, sigma, 0.0)?,
            None => {
                cands.sort_by(|a, b| b.score_or_zero().total_cmp(&a.score_or_zero()));
                cands
            }
        };
        ranked.truncate(self.config.top_k);
        Ok(ranked)
    }

    pub fn to_checkpoint(&self, state: TrainingState) -> Checkpoint {
        let spec = ModelSpec { feature_dim: self.feature_dim, config: self.config.clone() };
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
        let mut model = Self::new(spec.feature_dim, spec.config)?;
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

impl PartialEq for GroundingModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.feature_dim == other.feature_dim && self.store == other.store
    }
}

#[derive(Clone, Debug)]
pub struct GroundingOutcome {
    pub model: GroundingModel,
    /// Epoch losses of the pretraining phase followed by the fine-tuning phase.
    pub state: TrainingState,
}

struct QueryItem<'a> {
    track: &'a SnippetFeatureTrack,
    tokens: Vec<usize>,
    gt: TemporalSegment,
    duration_s: f64,
}

fn query_items<'a>(
    queries: &[GroundingQuery],
    index: &HashMap<&str, &'a SnippetFeatureTrack>,
) -> Result<Vec<QueryItem<'a>>> {
    queries
        .iter()
        .map(|q| {
            q.validate()?;
            let track = *index
                .get(q.clip_id.as_str())
                .ok_or_else(|| Error::Invariant(format!("no feature track for clip {}", q.clip_id)))?;
            Ok(QueryItem { track, tokens: query_tokens(&q.query_text), gt: q.require_gt()?, duration_s: q.duration_s })
        })
        .collect()
}

/// Pretrains on `pretrain_set` when given, then fine-tunes on `finetune_set`,
/// each phase with its own schedule from `cfg`.
pub fn train_grounding(
    pretrain_set: Option<&[GroundingQuery]>,
    finetune_set: &[GroundingQuery],
    tracks: &[SnippetFeatureTrack],
    cfg: &GroundingConfig,
) -> Result<GroundingOutcome> {
    if finetune_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dim = tracks.first().ok_or(Error::EmptyCorpus)?.dim();
    let mut model = GroundingModel::new(dim, cfg.clone())?;
    let index: HashMap<&str, &SnippetFeatureTrack> = tracks.iter().map(|t| (t.clip_id.as_str(), t)).collect();
    let pre = query_items(pretrain_set.unwrap_or(&[]), &index)?;
    let fine = query_items(finetune_set, &index)?;
    for item in pre.iter().chain(&fine) {
        model.check_track(item.track)?;
    }
    let (trunk, heads) = (model.trunk.clone(), model.heads);
    let item_grads = |store: &ParamStore, item: &QueryItem, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut g = Graph::with_params(store, true);
        let hidden = trunk.forward(&mut g, &item.track.features, Some(&item.tokens), cfg.regularization, rng);
        let geometry = Geometry::new(item.track, cfg.levels, item.duration_s);
        let out = heads.forward(&mut g, hidden, &geometry);
        let root = detection_loss(&mut g, &out, &geometry, &[(item.gt, 0)], cfg.loss);
        let loss = g.value(root).item();
        g.backward(root);
        Ok((loss, g.param_grads()))
    };
    let mut state = TrainingState::default();
    let seed = cfg.seed;
    run_phase(
        &mut model.store,
        &pre,
        cfg.pretrain,
        cfg.weight_decay,
        seed,
        "grounding.pretrain",
        &mut state,
        item_grads,
    )?;
    run_phase(
        &mut model.store,
        &fine,
        cfg.finetune,
        cfg.weight_decay,
        seed,
        "grounding.finetune",
        &mut state,
        item_grads,
    )?;
    Ok(GroundingOutcome { model, state })
}

/// Ranked segments of one query; the prediction file record shared with the
/// ensemble module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub query_id: String,
    pub segments: Vec<TemporalSegment>,
}

pub fn predict_grounding(
    model: &GroundingModel,
    queries: &[GroundingQuery],
    tracks: &[SnippetFeatureTrack],
) -> Result<Vec<GroundingPrediction>> {
    let index: HashMap<&str, &SnippetFeatureTrack> = tracks.iter().map(|t| (t.clip_id.as_str(), t)).collect();
    queries
        .par_iter()
        .map(|q| {
            let track = index
                .get(q.clip_id.as_str())
                .ok_or_else(|| Error::Invariant(format!("no feature track for clip {}", q.clip_id)))?;
            Ok(GroundingPrediction {
                query_id: q.query_id.clone(),
                segments: model.ground_query(track, &q.query_text, q.duration_s)?,
            })
        })
        .collect()
}

/// `R_k@t` for every `k` in `ks` (rows) and `t` in `tious` (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub tious: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl RecallTable {
    pub fn get(&self, k: usize, t: f64) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        let j = self.tious.iter().position(|&x| x == t)?;
        Some(self.values[i][j])
    }

    /// Cells keyed as `R{k}@{t}`.
    pub fn cells(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (i, k) in self.ks.iter().enumerate() {
            for (j, t) in self.tious.iter().enumerate() {
                out.push((format!("R{k}@{t}"), self.values[i][j]));
            }
        }
        out
    }
}

/// Fraction of ground-truth queries whose `k` highest-scoring predictions
/// contain a segment with tIoU ≥ `t`. A missing query counts as a miss and
/// score ties keep file order.
pub fn eval_grounding(
    predictions: &[GroundingPrediction],
    gt: &[GroundingQuery],
    ks: &[usize],
    tious: &[f64],
) -> Result<RecallTable> {
    let mut by_id: HashMap<&str, Vec<TemporalSegment>> = HashMap::new();
    for p in predictions {
        for s in &p.segments {
            s.validate()?;
        }
        by_id.entry(p.query_id.as_str()).or_insert_with(|| {
            let mut ranked = p.segments.clone();
            ranked.sort_by(|a, b| b.score_or_zero().total_cmp(&a.score_or_zero()));
            ranked
        });
    }
    let gts: Vec<(&str, TemporalSegment)> =
        gt.iter().map(|q| q.require_gt().map(|s| (q.query_id.as_str(), s))).collect::<Result<_>>()?;
    // best tIoU within each prefix length, per query
    let best_prefix: Vec<Vec<f64>> = gts
        .par_iter()
        .map(|(id, g)| {
            let ranked = by_id.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let mut best = 0.0f64;
            ranked
                .iter()
                .map(|s| {
                    best = best.max(tiou(s, g));
                    best
                })
                .collect()
        })
        .collect();
    let n = gts.len().max(1) as f64;
    let values = ks
        .iter()
        .map(|&k| {
            tious
                .iter()
                .map(|&t| {
                    let hits = best_prefix
                        .iter()
                        .filter(|b| k > 0 && !b.is_empty() && b[(k - 1).min(b.len() - 1)] >= t)
                        .count();
                    hits as f64 / n
                })
                .collect()
        })
        .collect();
    Ok(RecallTable { ks: ks.to_vec(), tious: tious.to_vec(), values })
}
