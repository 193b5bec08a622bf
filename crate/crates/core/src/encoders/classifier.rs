//! Verb and noun classification heads on the video tower.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Encoders};
use crate::autograd::Graph;
use crate::checkpoint::{restore_params, Checkpoint, TrainingState};
use crate::corpus::{Clip, Frames, SegmentLabel};
use crate::error::{Error, Result};
use crate::metrics::{label_rank, topk_accuracy};
use crate::nn::{Linear, Regularization};
use crate::rng::stream;
use crate::tensor::Matrix;
use crate::train::{run_phase, PhaseConfig};

pub const CLASSIFIER_KIND: &str = "classifier";

/// Frames of one labelled action interval.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub frames: Frames,
    pub verb: usize,
    pub noun: usize,
}

impl LabeledClip {
    pub fn from_segments(
        segments: &[SegmentLabel],
        clips: &[Clip],
        frames_per_clip: usize,
    ) -> Result<Vec<LabeledClip>> {
        let index: HashMap<&str, &Clip> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
        segments
            .iter()
            .map(|s| {
                let clip = index
                    .get(s.clip_id.as_str())
                    .ok_or_else(|| Error::Invariant(format!("segment {} references unknown clip", s.item_id)))?;
                Ok(LabeledClip {
                    frames: clip.sample_frames(s.start_s, s.end_s, frames_per_clip),
                    verb: s.verb,
                    noun: s.noun,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub phase: PhaseConfig,
    pub weight_decay: f64,
    pub frames_per_clip: usize,
    /// Train only the heads; the video tower keeps its stage-2 weights.
    pub freeze_backbone: bool,
    pub regularization: Regularization,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            phase: PhaseConfig::new(16, 10, 1, 2e-3),
            weight_decay: 0.01,
            frames_per_clip: 8,
            freeze_backbone: false,
            regularization: Regularization::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassifierSpec {
    encoder: EncoderConfig,
    num_verbs: usize,
    num_nouns: usize,
    config: ClassifierConfig,
}

/// The video tower with verb and noun heads on its embedding. Head tensors
/// live in the tower's parameter store under `cls.`.
#[derive(Clone, Debug)]
pub struct VideoClassifier {
    spec: ClassifierSpec,
    encoders: Encoders,
    verb: Linear,
    noun: Linear,
}

impl PartialEq for VideoClassifier {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.encoders == other.encoders
    }
}

impl VideoClassifier {
    /// Heads on a copy of `backbone`.
    pub fn new(backbone: &Encoders, num_verbs: usize, num_nouns: usize, config: ClassifierConfig) -> Result<Self> {
        if num_verbs == 0 || num_nouns == 0 {
            return Err(Error::Config("classifier needs at least one verb and one noun".into()));
        }
        config.phase.validate("classifier")?;
        let mut encoders = backbone.clone();
        let d = encoders.config().embed_dim;
        let mut rng = stream(config.seed, "classifier.init", 0);
        let verb = Linear::new(encoders.params_mut(), "cls.verb", d, num_verbs, &mut rng);
        let noun = Linear::new(encoders.params_mut(), "cls.noun", d, num_nouns, &mut rng);
        let store = encoders.params_mut();
        store.set_trainable_prefix("text.", false);
        store.set_trainable_prefix("logit.", false);
        if config.freeze_backbone {
            store.set_trainable_prefix("video.", false);
        }
        let spec = ClassifierSpec { encoder: backbone.config().clone(), num_verbs, num_nouns, config };
        Ok(Self { spec, encoders, verb, noun })
    }

    pub fn num_verbs(&self) -> usize {
        self.spec.num_verbs
    }

    pub fn num_nouns(&self) -> usize {
        self.spec.num_nouns
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.spec.config
    }

    /// Errors unless the heads match a world with this vocabulary.
    pub fn check_vocab(&self, num_verbs: usize, num_nouns: usize) -> Result<()> {
        if (num_verbs, num_nouns) != (self.spec.num_verbs, self.spec.num_nouns) {
            return Err(Error::Config(format!(
                "classifier has {}x{} verb/noun classes, data has {num_verbs}x{num_nouns}",
                self.spec.num_verbs, self.spec.num_nouns
            )));
        }
        Ok(())
    }

    /// The fine-tuned video and text towers without the heads.
    pub fn backbone(&self) -> Result<Encoders> {
        let mut enc = Encoders::new(self.spec.encoder.clone())?;
        enc.params_mut().load_matching(self.encoders.params());
        Ok(enc)
    }

    fn forward(
        &self,
        g: &mut Graph,
        frames: &Frames,
        reg: Regularization,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(crate::autograd::Var, crate::autograd::Var)> {
        let e = self.encoders.video_forward(g, frames, reg, rng)?;
        // unit-norm embeddings rescaled so the heads start in a useful range
        let e = g.scale(e, (self.encoders.config().embed_dim as f64).sqrt());
        Ok((self.verb.forward(g, e), self.noun.forward(g, e)))
    }

    /// Verb and noun logits of one clip.
    pub fn classify_clip(&self, frames: &Frames) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::with_params(self.encoders.params(), false);
        let mut rng = stream(0, "classifier.eval", 0);
        let (v, n) = self.forward(&mut g, frames, Regularization::default(), &mut rng)?;
        Ok((g.value(v).as_slice().to_vec(), g.value(n).as_slice().to_vec()))
    }

    /// Row-stacked verb and noun logits.
    pub fn classify_clips(&self, clips: &[Frames]) -> Result<(Matrix, Matrix)> {
        let rows: Vec<(Vec<f64>, Vec<f64>)> = clips.par_iter().map(|f| self.classify_clip(f)).collect::<Result<_>>()?;
        let verbs = Matrix::from_vec(rows.len(), self.spec.num_verbs, rows.iter().flat_map(|r| r.0.clone()).collect());
        let nouns = Matrix::from_vec(rows.len(), self.spec.num_nouns, rows.iter().flat_map(|r| r.1.clone()).collect());
        Ok((verbs, nouns))
    }

    pub fn to_checkpoint(&self, state: TrainingState) -> Checkpoint {
        Checkpoint {
            kind: CLASSIFIER_KIND.into(),
            config: serde_json::to_value(&self.spec).expect("config serializes"),
            params: self.encoders.params().clone(),
            state,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CLASSIFIER_KIND)?;
        let spec: ClassifierSpec = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(&Encoders::new(spec.encoder.clone())?, spec.num_verbs, spec.num_nouns, spec.config)?;
        restore_params(model.encoders.params_mut(), &ckpt.params)?;
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
pub struct ClassifierOutcome {
    pub model: VideoClassifier,
    pub state: TrainingState,
}

/// Fine-tunes heads (and, unless frozen, the video tower) with the sum of
/// verb and noun cross-entropies.
pub fn train_classifier(
    backbone: &Encoders,
    items: &[LabeledClip],
    num_verbs: usize,
    num_nouns: usize,
    cfg: &ClassifierConfig,
) -> Result<ClassifierOutcome> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for it in items {
        if it.verb >= num_verbs {
            return Err(Error::LabelOutOfRange { label: it.verb, classes: num_verbs });
        }
        if it.noun >= num_nouns {
            return Err(Error::LabelOutOfRange { label: it.noun, classes: num_nouns });
        }
    }
    let mut model = VideoClassifier::new(backbone, num_verbs, num_nouns, cfg.clone())?;
    let frozen = model.clone();
    let mut state = TrainingState::default();
    run_phase(
        model.encoders.params_mut(),
        items,
        cfg.phase,
        cfg.weight_decay,
        cfg.seed,
        "classifier",
        &mut state,
        |store, item, rng| {
            let mut g = Graph::with_params(store, true);
            let (v, n) = frozen.forward(&mut g, &item.frames, cfg.regularization, rng)?;
            let lv = g.cross_entropy(v, &[item.verb]);
            let ln = g.cross_entropy(n, &[item.noun]);
            let root = g.add(lv, ln);
            let loss = g.value(root).item();
            g.backward(root);
            Ok((loss, g.param_grads()))
        },
    )?;
    Ok(ClassifierOutcome { model, state })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub verb_top1: f64,
    pub noun_top1: f64,
    /// Both verb and noun correct.
    pub action_top1: f64,
}

/// Top-1 accuracies with lowest-id tie-breaking.
pub fn classification_report(
    verb_logits: &Matrix,
    noun_logits: &Matrix,
    verbs: &[usize],
    nouns: &[usize],
) -> Result<ClassificationReport> {
    let verb_top1 = topk_accuracy(verb_logits, verbs, 1)?;
    let noun_top1 = topk_accuracy(noun_logits, nouns, 1)?;
    if verbs.len() != nouns.len() {
        return Err(Error::Shape(format!("{} verb labels but {} noun labels", verbs.len(), nouns.len())));
    }
    let hits = (0..verbs.len())
        .filter(|&r| label_rank(verb_logits.row(r), verbs[r]) == 0 && label_rank(noun_logits.row(r), nouns[r]) == 0)
        .count();
    let action_top1 = if verbs.is_empty() { 0.0 } else { hits as f64 / verbs.len() as f64 };
    Ok(ClassificationReport { verb_top1, noun_top1, action_top1 })
}
