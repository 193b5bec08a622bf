//! Contrastive training loop shared by post-pretraining and retrieval fine-tuning.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, Encoders};
use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, TrainingState};
use crate::corpus::{Clip, ClipTextPair, Frames};
use crate::error::{Error, Result};
use crate::nn::{shuffled_batches, sum_grads, AdamW, ParamId, Regularization, WarmupCosine};
use crate::rng::stream;
use crate::tensor::Matrix;

use super::{TAU_MAX, TAU_MIN};

/// Decoded frames of one narration interval and its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub frames: Frames,
    pub caption: String,
}

impl TrainingPair {
    /// Samples `frames_per_pair` frames from each pair's interval.
    pub fn from_corpus(corpus: &[ClipTextPair], clips: &[Clip], frames_per_pair: usize) -> Result<Vec<TrainingPair>> {
        let index: HashMap<&str, &Clip> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
        corpus
            .iter()
            .map(|p| {
                let clip = index
                    .get(p.clip_id.as_str())
                    .ok_or_else(|| Error::Invariant(format!("pair references unknown clip {}", p.clip_id)))?;
                Ok(TrainingPair {
                    frames: clip.sample_frames(p.start_s, p.end_s, frames_per_pair),
                    caption: p.caption.clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub frames_per_pair: usize,
    pub regularization: Regularization,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 2e-3,
            batch: 16,
            warmup_epochs: 1,
            weight_decay: 0.01,
            frames_per_pair: 8,
            regularization: Regularization::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.frames_per_pair == 0 {
            return Err(Error::Config("batch and frames_per_pair must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoders: Encoders,
    pub state: TrainingState,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.encoders.to_checkpoint(self.state.clone())
    }
}

/// Loss and summed parameter gradients of one batch. Each pair is forwarded
/// on its own tape; the closed-form loss gradient is then fed back into every
/// tape.
pub fn contrastive_batch_grads(
    enc: &Encoders,
    batch: &[&TrainingPair],
    reg: Regularization,
    seed: u64,
    step: u64,
) -> Result<(f64, Vec<(ParamId, Matrix)>)> {
    let store = enc.params();
    let mut tapes: Vec<(Graph, Var, Var)> = batch
        .par_iter()
        .enumerate()
        .map(|(k, pair)| {
            let mut g = Graph::with_params(store, true);
            let mut rng = stream(seed, "contrastive.sample", (step << 16) | k as u64);
            let v = enc.video_forward(&mut g, &pair.frames, reg, &mut rng)?;
            let t = enc.text_forward(&mut g, &pair.caption, reg, &mut rng);
            Ok((g, v, t))
        })
        .collect::<Result<_>>()?;
    let videos: Vec<&Matrix> = tapes.iter().map(|(g, v, _)| g.value(*v)).collect();
    let texts: Vec<&Matrix> = tapes.iter().map(|(g, _, t)| g.value(*t)).collect();
    let (videos, texts) = (Matrix::concat_rows(&videos), Matrix::concat_rows(&texts));
    let raw_tau = store.value(enc.log_tau_id()).item().exp();
    let tau = raw_tau.clamp(TAU_MIN, TAU_MAX);
    let out = contrastive_loss(&videos, &texts, tau)?;

    let mut parts: Vec<Vec<(ParamId, Matrix)>> = tapes
        .par_iter_mut()
        .enumerate()
        .map(|(k, (g, v, t))| {
            let gv = Matrix::row_vector(out.grad_video.row(k));
            let gt = Matrix::row_vector(out.grad_text.row(k));
            let root = g.scalar_op(0.0, vec![(*v, gv), (*t, gt)]);
            g.backward(root);
            g.param_grads()
        })
        .collect();
    let tau_id = enc.log_tau_id();
    if store.is_trainable(tau_id) && raw_tau == tau {
        parts.push(vec![(tau_id, Matrix::scalar(out.grad_tau * tau))]);
    }
    Ok((out.loss, sum_grads(parts)))
}

/// Contrastive training from `init`. Logs and records the mean batch loss of
/// every epoch; `epochs = 0` returns `init` unchanged.
pub fn post_pretrain(init: &Encoders, pairs: &[TrainingPair], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut enc = init.clone();
    let mut batches_per_epoch = pairs.len().div_ceil(cfg.batch);
    if batches_per_epoch > 1 && pairs.len() % cfg.batch == 1 {
        batches_per_epoch -= 1;
    }
    let schedule = WarmupCosine {
        max_lr: cfg.lr,
        warmup_steps: cfg.warmup_epochs * batches_per_epoch,
        total_steps: cfg.epochs * batches_per_epoch,
    };
    let mut opt = AdamW::new(enc.params(), cfg.weight_decay);
    let mut state = TrainingState::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "contrastive.shuffle", epoch as u64);
        let mut batches = shuffled_batches(pairs.len(), cfg.batch, &mut rng);
        // a single-pair batch carries no contrastive signal
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("nonempty");
            batches.last_mut().expect("nonempty").extend(tail);
        }
        let mut total = 0.0;
        for batch in &batches {
            let items: Vec<&TrainingPair> = batch.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) = contrastive_batch_grads(&enc, &items, cfg.regularization, cfg.seed, step as u64)?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!("non-finite contrastive loss at epoch {epoch}")));
            }
            opt.update(enc.params_mut(), &grads, schedule.lr(step));
            total += loss;
            step += 1;
        }
        let mean = total / batches.len() as f64;
        log::info!("contrastive epoch {}/{}: mean loss {mean:.4}, tau {:.4}", epoch + 1, cfg.epochs, enc.temperature());
        state.epoch_losses.push(mean);
        state.epoch = epoch + 1;
    }
    state.optimizer = Some(opt);
    Ok(PretrainOutcome { encoders: enc, state })
}
