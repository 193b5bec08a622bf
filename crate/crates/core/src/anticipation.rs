//! Long-term action anticipation: clip classification for the observed
//! history, an autoregressive forecaster over action tokens and the
//! edit-distance evaluation of 20-action rollouts.

use std::collections::HashMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{restore_params, Checkpoint, TrainingState};
use crate::corpus::{ActionToken, AnticipationAnnotation, Clip, FUTURE_LEN, HISTORY_LEN};
use crate::encoders::VideoClassifier;
use crate::error::{Error, Result};
use crate::metrics::levenshtein;
use crate::nn::{causal_mask, LayerNorm, Linear, ParamStore, Regularization, TransformerBlock};
use crate::rng::stream;
use crate::tensor::{argmax, Matrix};
use crate::train::{run_epochs, EpochPlan};

pub const CHECKPOINT_KIND: &str = "forecaster";
/// Longest sequence the forecaster attends over.
pub const MAX_POSITIONS: usize = HISTORY_LEN + FUTURE_LEN;

/// Eight observed actions and the twenty that follow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnticipationExample {
    pub example_id: String,
    pub history: Vec<ActionToken>,
    pub future: Vec<ActionToken>,
}

impl AnticipationExample {
    pub fn validate(&self, num_verbs: usize, num_nouns: usize) -> Result<()> {
        if self.history.len() != HISTORY_LEN || self.future.len() != FUTURE_LEN {
            return Err(Error::Shape(format!(
                "example {} has {}+{} actions, expected {HISTORY_LEN}+{FUTURE_LEN}",
                self.example_id,
                self.history.len(),
                self.future.len()
            )));
        }
        self.history.iter().chain(&self.future).try_for_each(|t| check_token(*t, num_verbs, num_nouns))
    }
}

impl From<&AnticipationAnnotation> for AnticipationExample {
    /// Ground-truth history, as used for teacher forcing.
    fn from(a: &AnticipationAnnotation) -> Self {
        Self {
            example_id: a.example_id.clone(),
            history: a.history.iter().map(|h| h.token).collect(),
            future: a.future.clone(),
        }
    }
}

fn check_token(t: ActionToken, num_verbs: usize, num_nouns: usize) -> Result<()> {
    if t.verb >= num_verbs {
        return Err(Error::LabelOutOfRange { label: t.verb, classes: num_verbs });
    }
    if t.noun >= num_nouns {
        return Err(Error::LabelOutOfRange { label: t.noun, classes: num_nouns });
    }
    Ok(())
}

/// Histories predicted by the clip classifier: each observed interval is
/// sampled and labelled with (argmax verb, argmax noun).
pub fn classify_histories(
    classifier: &VideoClassifier,
    annotations: &[AnticipationAnnotation],
    clips: &[Clip],
) -> Result<Vec<AnticipationExample>> {
    let index: HashMap<&str, &Clip> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
    let frames = classifier.config().frames_per_clip;
    annotations
        .par_iter()
        .map(|a| {
            let history = a
                .history
                .iter()
                .map(|h| {
                    let clip = index.get(h.clip_id.as_str()).ok_or_else(|| {
                        Error::Invariant(format!("{} references unknown clip {}", a.example_id, h.clip_id))
                    })?;
                    let (v, n) = classifier.classify_clip(&clip.sample_frames(h.start_s, h.end_s, frames))?;
                    Ok(ActionToken { verb: argmax(&v), noun: argmax(&n) })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AnticipationExample { example_id: a.example_id.clone(), history, future: a.future.clone() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LTATrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub gamma: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Candidate rollouts per example.
    pub k: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Sampling temperature for candidates after the greedy one.
    pub temperature: f64,
    pub weight_decay: f64,
    pub regularization: Regularization,
    pub seed: u64,
}

impl Default for LTATrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            gamma: 0.85,
            batch: 32,
            epochs: 3,
            k: 5,
            hidden: 32,
            depth: 2,
            temperature: 1.0,
            weight_decay: 0.01,
            regularization: Regularization::default(),
            seed: 0,
        }
    }
}

impl LTATrainConfig {
    /// Enough updates for the small synthetic corpora: three epochs over a
    /// few dozen examples is only a handful of steps.
    pub fn desk() -> Self {
        Self { lr: 3e-3, gamma: 0.97, batch: 8, epochs: 60, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("lta: K must be at least 1".into()));
        }
        if self.batch == 0 || self.hidden == 0 {
            return Err(Error::Config("lta: batch and hidden must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.gamma > 0.0 && self.temperature > 0.0) {
            return Err(Error::Config("lta: lr must be non-negative, gamma and temperature positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ForecasterSpec {
    num_verbs: usize,
    num_nouns: usize,
    hidden: usize,
    depth: usize,
    seed: u64,
}

/// Causal transformer over action ids with learned positions.
#[derive(Clone, Debug)]
pub struct ActionForecaster {
    spec: ForecasterSpec,
    params: ParamStore,
    token_embed: usize,
    pos_embed: usize,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl PartialEq for ActionForecaster {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl ActionForecaster {
    pub fn new(num_verbs: usize, num_nouns: usize, hidden: usize, depth: usize, seed: u64) -> Result<Self> {
        if num_verbs == 0 || num_nouns == 0 || hidden == 0 {
            return Err(Error::Config("forecaster needs a nonempty vocabulary and width".into()));
        }
        let spec = ForecasterSpec { num_verbs, num_nouns, hidden, depth, seed };
        let mut rng = stream(seed, "forecaster.init", 0);
        let mut params = ParamStore::new();
        let actions = num_verbs * num_nouns;
        let token_embed = params.add("lta.token_embed", Matrix::randn(actions, hidden, 0.5, &mut rng));
        let pos_embed = params.add("lta.pos_embed", Matrix::randn(MAX_POSITIONS, hidden, 0.1, &mut rng));
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(&mut params, &format!("lta.blocks.{i}"), hidden, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut params, "lta.norm", hidden);
        let head = Linear::new(&mut params, "lta.head", hidden, actions, &mut rng);
        Ok(Self { spec, params, token_embed, pos_embed, blocks, norm, head })
    }

    pub fn num_verbs(&self) -> usize {
        self.spec.num_verbs
    }

    pub fn num_nouns(&self) -> usize {
        self.spec.num_nouns
    }

    pub fn num_actions(&self) -> usize {
        self.spec.num_verbs * self.spec.num_nouns
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Next-action logits at every position of `ids`.
    fn forward(&self, g: &mut Graph, ids: &[usize], reg: Regularization, rng: &mut ChaCha8Rng) -> Var {
        let n = ids.len();
        let table = g.param(self.token_embed);
        let x = g.select_rows(table, ids.to_vec());
        let pos = g.param(self.pos_embed);
        let pos = g.select_rows(pos, (0..n).collect());
        let mut x = g.add(x, pos);
        let mask = causal_mask(n);
        for block in &self.blocks {
            x = block.forward(g, x, Some(&mask), reg, rng);
        }
        let x = self.norm.forward(g, x);
        self.head.forward(g, x)
    }

    fn last_logits(&self, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::with_params(&self.params, false);
        let mut rng = stream(0, "forecaster.eval", 0);
        let out = self.forward(&mut g, ids, Regularization::default(), &mut rng);
        g.value(out).row(ids.len() - 1).to_vec()
    }

    fn rollout(&self, history: &[usize], sample: Option<(f64, &mut ChaCha8Rng)>) -> Vec<ActionToken> {
        let mut ids = history.to_vec();
        let mut sample = sample;
        for _ in 0..FUTURE_LEN {
            let logits = self.last_logits(&ids);
            let next = match sample.as_mut() {
                None => argmax(&logits),
                Some((temp, rng)) => {
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|&l| ((l - m) / *temp).exp()).collect();
                    WeightedIndex::new(&w).map(|d| d.sample(*rng)).unwrap_or_else(|_| argmax(&logits))
                }
            };
            ids.push(next);
        }
        ids[history.len()..].iter().map(|&a| ActionToken::from_action_id(a, self.spec.num_nouns)).collect()
    }

    /// `k` rollouts of `FUTURE_LEN` actions. Candidate 0 is greedy; the rest
    /// are sampled at `temperature` from a stream keyed by `seed`.
    pub fn predict_future(
        &self,
        history: &[ActionToken],
        k: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<Vec<ActionToken>>> {
        if k < 1 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if history.is_empty() || history.len() > HISTORY_LEN {
            return Err(Error::Shape(format!("history must hold 1..={HISTORY_LEN} actions, got {}", history.len())));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config("sampling temperature must be positive".into()));
        }
        let ids = history
            .iter()
            .map(|t| {
                check_token(*t, self.spec.num_verbs, self.spec.num_nouns)?;
                Ok(t.action_id(self.spec.num_nouns))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![self.rollout(&ids, None)];
        for c in 1..k {
            let mut rng = stream(seed, "forecaster.sample", c as u64);
            out.push(self.rollout(&ids, Some((temperature, &mut rng))));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, state: TrainingState) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.spec).expect("config serializes"),
            params: self.params.clone(),
            state,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let s: ForecasterSpec = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(s.num_verbs, s.num_nouns, s.hidden, s.depth, s.seed)?;
        restore_params(&mut model.params, &ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, state: TrainingState) -> Result<()> {
        self.to_checkpoint(state).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct ForecasterOutcome {
    pub model: ActionForecaster,
    pub state: TrainingState,
}

/// Teacher-forced next-action cross-entropy over history followed by
/// future; the learning rate is `lr · gamma^epoch`.
pub fn train_forecaster(
    examples: &[AnticipationExample],
    num_verbs: usize,
    num_nouns: usize,
    cfg: &LTATrainConfig,
) -> Result<ForecasterOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sequences = examples
        .iter()
        .map(|e| {
            e.validate(num_verbs, num_nouns)?;
            Ok(e.history.iter().chain(&e.future).map(|t| t.action_id(num_nouns)).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let mut model = ActionForecaster::new(num_verbs, num_nouns, cfg.hidden, cfg.depth, cfg.seed)?;
    let frozen = model.clone();
    let mut state = TrainingState::default();
    let plan = EpochPlan { batch: cfg.batch, epochs: cfg.epochs, weight_decay: cfg.weight_decay, seed: cfg.seed };
    run_epochs(
        &mut model.params,
        &sequences,
        plan,
        "lta",
        &mut state,
        |epoch, _| cfg.lr * cfg.gamma.powi(epoch as i32),
        |store, seq: &Vec<usize>, rng| {
            let mut g = Graph::with_params(store, true);
            let n = seq.len() - 1;
            let logits = frozen.forward(&mut g, &seq[..n], cfg.regularization, rng);
            let loss = g.cross_entropy(logits, &seq[1..]);
            let value = g.value(loss).item();
            g.backward(loss);
            Ok((value, g.param_grads()))
        },
    )?;
    Ok(ForecasterOutcome { model, state })
}

/// Candidate rollouts of one example, as stored in JSON lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub example_id: String,
    pub candidates: Vec<Vec<ActionToken>>,
}

/// Rollouts for every example; per-example sampling streams are keyed by
/// position so results do not depend on thread scheduling.
pub fn predict_candidates(
    model: &ActionForecaster,
    examples: &[AnticipationExample],
    cfg: &LTATrainConfig,
) -> Result<Vec<CandidateRecord>> {
    cfg.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let seed = rand::RngCore::next_u64(&mut stream(cfg.seed, "lta.predict", i as u64));
            Ok(CandidateRecord {
                example_id: e.example_id.clone(),
                candidates: model.predict_future(&e.history, cfg.k, cfg.temperature, seed)?,
            })
        })
        .collect()
}

/// Edit distances scaled to 0..=100.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDistanceReport {
    pub verb: f64,
    pub noun: f64,
    pub action: f64,
    pub examples: usize,
}

/// Per example the best of its candidates under Levenshtein distance over
/// `FUTURE_LEN`, computed separately on verbs, nouns and (verb, noun)
/// pairs; the mean over examples times 100.
pub fn edit_distance_eval(
    candidate_sets: &[Vec<Vec<ActionToken>>],
    gts: &[Vec<ActionToken>],
) -> Result<EditDistanceReport> {
    if candidate_sets.len() != gts.len() {
        return Err(Error::Shape(format!("{} candidate sets for {} examples", candidate_sets.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::Empty("no examples to evaluate".into()));
    }
    let (mut verb, mut noun, mut action) = (0.0, 0.0, 0.0);
    for (cands, gt) in candidate_sets.iter().zip(gts) {
        if gt.len() != FUTURE_LEN {
            return Err(Error::Shape(format!("ground truth has {} actions, expected {FUTURE_LEN}", gt.len())));
        }
        if cands.is_empty() {
            return Err(Error::Config("an example has no candidates".into()));
        }
        let gv: Vec<usize> = gt.iter().map(|t| t.verb).collect();
        let gn: Vec<usize> = gt.iter().map(|t| t.noun).collect();
        let (mut bv, mut bn, mut ba) = (usize::MAX, usize::MAX, usize::MAX);
        for c in cands {
            if c.len() != FUTURE_LEN {
                return Err(Error::Shape(format!("candidate has {} actions, expected {FUTURE_LEN}", c.len())));
            }
            let cv: Vec<usize> = c.iter().map(|t| t.verb).collect();
            let cn: Vec<usize> = c.iter().map(|t| t.noun).collect();
            bv = bv.min(levenshtein(&cv, &gv));
            bn = bn.min(levenshtein(&cn, &gn));
            ba = ba.min(levenshtein(c, gt));
        }
        verb += bv as f64 / FUTURE_LEN as f64;
        noun += bn as f64 / FUTURE_LEN as f64;
        action += ba as f64 / FUTURE_LEN as f64;
    }
    let n = gts.len() as f64;
    Ok(EditDistanceReport {
        verb: 100.0 * verb / n,
        noun: 100.0 * noun / n,
        action: 100.0 * action / n,
        examples: gts.len(),
    })
}

/// Joins candidate records to examples by id; every example needs a record.
pub fn eval_candidates(records: &[CandidateRecord], examples: &[AnticipationExample]) -> Result<EditDistanceReport> {
    let by_id: HashMap<&str, &CandidateRecord> = records.iter().map(|r| (r.example_id.as_str(), r)).collect();
    let mut sets = Vec::with_capacity(examples.len());
    for e in examples {
        let r = by_id
            .get(e.example_id.as_str())
            .ok_or_else(|| Error::Invariant(format!("no candidates for example {}", e.example_id)))?;
        sets.push(r.candidates.clone());
    }
    let gts: Vec<Vec<ActionToken>> = examples.iter().map(|e| e.future.clone()).collect();
    edit_distance_eval(&sets, &gts)
}

#[cfg(test)]
mod tests;
