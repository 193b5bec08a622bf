//! Minibatch training loops shared by the task heads.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainingState;
use crate::error::{Error, Result};
use crate::nn::{scale_grads, shuffled_batches, sum_grads, AdamW, ParamId, ParamStore, WarmupCosine};
use crate::rng::stream;
use crate::tensor::Matrix;

/// Optimizer schedule of one training phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub max_lr: f64,
}

impl PhaseConfig {
    pub fn new(batch: usize, epochs: usize, warmup_epochs: usize, max_lr: f64) -> Self {
        Self { batch, epochs, warmup_epochs, max_lr }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config(format!("{name}: batch must be positive")));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!("{name}: warmup epochs must be fewer than epochs")));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("{name}: learning rate must be nonnegative")));
        }
        Ok(())
    }
}

/// Per-item loss and gradients for [`run_phase`].
pub type ItemGrads = (f64, Vec<(ParamId, Matrix)>);

/// Minibatch AdamW with warmup-cosine over one phase.
#[allow(clippy::too_many_arguments)]
pub fn run_phase<T, F>(
    store: &mut ParamStore,
    items: &[T],
    phase: PhaseConfig,
    weight_decay: f64,
    seed: u64,
    tag: &str,
    state: &mut TrainingState,
    item_grads: F,
) -> Result<()>
where
    T: Sync,
    F: Fn(&ParamStore, &T, &mut ChaCha8Rng) -> Result<ItemGrads> + Sync,
{
    let batches_per_epoch = items.len().div_ceil(phase.batch.max(1));
    let schedule = WarmupCosine {
        max_lr: phase.max_lr,
        warmup_steps: phase.warmup_epochs * batches_per_epoch,
        total_steps: phase.epochs * batches_per_epoch,
    };
    let plan = EpochPlan { batch: phase.batch, epochs: phase.epochs, weight_decay, seed };
    run_epochs(store, items, plan, tag, state, |_, step| schedule.lr(step), item_grads)
}

/// Batch size, epoch count and optimizer settings shared by every loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochPlan {
    pub batch: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Minibatch AdamW with the learning rate given per `(epoch, step)`. Items
/// of a batch are evaluated in parallel and their gradients averaged; the
/// mean batch loss of each epoch is appended to `state`.
pub fn run_epochs<T, F>(
    store: &mut ParamStore,
    items: &[T],
    plan: EpochPlan,
    tag: &str,
    state: &mut TrainingState,
    lr_at: impl Fn(usize, usize) -> f64,
    item_grads: F,
) -> Result<()>
where
    T: Sync,
    F: Fn(&ParamStore, &T, &mut ChaCha8Rng) -> Result<ItemGrads> + Sync,
{
    if plan.epochs == 0 || items.is_empty() {
        return Ok(());
    }
    let seed = plan.seed;
    let mut opt = AdamW::new(store, plan.weight_decay);
    let mut step = 0usize;
    for epoch in 0..plan.epochs {
        let mut rng = stream(seed, &format!("{tag}.shuffle"), epoch as u64);
        let batches = shuffled_batches(items.len(), plan.batch, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let frozen: &ParamStore = store;
            let parts: Vec<ItemGrads> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(seed, &format!("{tag}.item"), ((step as u64) << 20) | i as u64);
                    item_grads(frozen, &items[i], &mut rng)
                })
                .collect::<Result<_>>()?;
            let loss = parts.iter().map(|p| p.0).sum::<f64>() / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!("non-finite {tag} loss at epoch {epoch}")));
            }
            let mut grads = sum_grads(parts.into_iter().map(|p| p.1).collect());
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.update(store, &grads, lr_at(epoch, step));
            total += loss;
            step += 1;
        }
        let mean = total / batches.len() as f64;
        log::info!("{tag} epoch {}/{}: mean loss {mean:.4}", epoch + 1, plan.epochs);
        state.epoch_losses.push(mean);
        state.epoch += 1;
    }
    Ok(())
}
