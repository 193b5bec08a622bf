//! Two-tower video/text encoders and contrastive post-pretraining.
//!
//! The video tower patchifies every frame, mixes patch tokens with residual
//! MLP blocks, averages them into one token per frame and runs temporal
//! self-attention over the frame tokens. The text tower embeds template
//! tokens and runs a small transformer. Both towers end in a linear
//! projection to `embed_dim` followed by L2 normalization.

mod classifier;
mod contrastive;
mod pretrain;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classifier::{
    classification_report, train_classifier, ClassificationReport, ClassifierConfig, ClassifierOutcome, LabeledClip,
    VideoClassifier, CLASSIFIER_KIND,
};
pub use contrastive::{contrastive_loss, contrastive_loss_node, ContrastiveOutput};
pub use pretrain::{post_pretrain, PretrainConfig, PretrainOutcome, TrainingPair};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{restore_params, Checkpoint, TrainingState};
use crate::corpus::vocab::{Vocabulary, PAD};
use crate::corpus::Frames;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, LayerNorm, Linear, Mlp, ParamId, ParamStore, Regularization, TransformerBlock};
use crate::rng::stream;
use crate::tensor::Matrix;

pub const CHECKPOINT_KIND: &str = "encoders";
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

/// A unit-norm embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// `(H, W, C)` of every input frame.
    pub frame_size: (usize, usize, usize),
    pub patch_size: usize,
    pub hidden: usize,
    pub spatial_depth: usize,
    pub temporal_depth: usize,
    pub text_vocab: usize,
    pub text_depth: usize,
    pub max_text_len: usize,
    pub temperature: f64,
    pub learnable_temperature: bool,
    /// Recorded for parity with large-scale runs; ignored on CPU.
    pub bf16: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            frame_size: (16, 16, 3),
            patch_size: 4,
            hidden: 32,
            spatial_depth: 1,
            temporal_depth: 1,
            text_vocab: Vocabulary::global().len(),
            text_depth: 2,
            max_text_len: 12,
            temperature: 0.07,
            learnable_temperature: true,
            bf16: false,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim < 8 {
            return bad("embed_dim must be at least 8");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        let (h, w, c) = self.frame_size;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 || c == 0 {
            return bad("frame height and width must be multiples of patch_size");
        }
        if self.hidden < 2 || self.max_text_len == 0 {
            return bad("hidden width and max_text_len must be positive");
        }
        if self.text_vocab < Vocabulary::global().len() {
            return bad("text_vocab is smaller than the template vocabulary");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let (h, w, _) = self.frame_size;
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.frame_size.2
    }
}

#[derive(Clone, Debug)]
struct VideoTower {
    patch_embed: Linear,
    spatial_pos: ParamId,
    spatial: Vec<(LayerNorm, Mlp)>,
    temporal: Vec<TransformerBlock>,
    norm: LayerNorm,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct TextTower {
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    proj: Linear,
}

/// Both towers plus the learnable log-temperature.
#[derive(Clone, Debug)]
pub struct Encoders {
    config: EncoderConfig,
    params: ParamStore,
    video: VideoTower,
    text: TextTower,
    log_tau: ParamId,
}

impl PartialEq for Encoders {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Flattens frames into `(T·P) × (p·p·C)` patch rows scaled to `[-1, 1]`.
pub fn patchify(frames: &Frames, patch: usize) -> Matrix {
    let (ph, pw) = (frames.h / patch, frames.w / patch);
    let dim = patch * patch * frames.c;
    let mut out = Matrix::zeros(frames.t * ph * pw, dim);
    for f in 0..frames.t {
        let frame = frames.frame(f);
        for py in 0..ph {
            for px in 0..pw {
                let row = out.row_mut((f * ph + py) * pw + px);
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((py * patch + y) * frames.w + px * patch + x) * frames.c;
                        for ch in 0..frames.c {
                            row[k] = f64::from(frame[base + ch]) / 127.5 - 1.0;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, "encoders.init", 0);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let video = VideoTower {
            patch_embed: Linear::new(&mut params, "video.patch_embed", config.patch_dim(), h, &mut rng),
            spatial_pos: params.add("video.spatial_pos", Matrix::randn(config.num_patches(), h, 0.5, &mut rng)),
            spatial: (0..config.spatial_depth)
                .map(|i| {
                    let name = format!("video.spatial.{i}");
                    (
                        LayerNorm::new(&mut params, &format!("{name}.norm"), h),
                        Mlp::new(&mut params, &format!("{name}.mlp"), h, 2 * h, h, &mut rng),
                    )
                })
                .collect(),
            temporal: (0..config.temporal_depth)
                .map(|i| TransformerBlock::new(&mut params, &format!("video.temporal.{i}"), h, &mut rng))
                .collect(),
            norm: LayerNorm::new(&mut params, "video.norm", h),
            proj: Linear::new(&mut params, "video.proj", h, config.embed_dim, &mut rng),
        };
        let text = TextTower {
            token_embed: params.add("text.token_embed", Matrix::randn(config.text_vocab, h, 0.5, &mut rng)),
            pos_embed: params.add("text.pos_embed", Matrix::randn(config.max_text_len, h, 0.1, &mut rng)),
            blocks: (0..config.text_depth)
                .map(|i| TransformerBlock::new(&mut params, &format!("text.blocks.{i}"), h, &mut rng))
                .collect(),
            norm: LayerNorm::new(&mut params, "text.norm", h),
            proj: Linear::new(&mut params, "text.proj", h, config.embed_dim, &mut rng),
        };
        let log_tau = params.add("logit.log_tau", Matrix::scalar(config.temperature.ln()));
        if !config.learnable_temperature {
            params.set_trainable_prefix("logit.", false);
        }
        Ok(Self { config, params, video, text, log_tau })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.log_tau
    }

    /// Current temperature, clamped to `[TAU_MIN, TAU_MAX]`.
    pub fn temperature(&self) -> f64 {
        self.params.value(self.log_tau).item().exp().clamp(TAU_MIN, TAU_MAX)
    }

    pub fn check_frames(&self, frames: &Frames) -> Result<()> {
        if frames.t == 0 {
            return Err(Error::Shape("video needs at least one frame".into()));
        }
        if (frames.h, frames.w, frames.c) != self.config.frame_size {
            return Err(Error::Shape(format!(
                "frames are {}x{}x{}, encoder expects {:?}",
                frames.h, frames.w, frames.c, self.config.frame_size
            )));
        }
        Ok(())
    }

    /// Records the video tower on `g`; returns a `1 × embed_dim` unit row.
    pub fn video_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        frames: &Frames,
        reg: Regularization,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_frames(frames)?;
        let v = &self.video;
        let x = g.constant(patchify(frames, self.config.patch_size));
        let x = v.patch_embed.forward(g, x);
        let pos = g.param(v.spatial_pos);
        let mut x = g.add_tiled(x, pos);
        for (norm, mlp) in &v.spatial {
            let h = norm.forward(g, x);
            let h = mlp.forward(g, h);
            x = g.add(x, h);
        }
        let x = g.group_mean_rows(x, self.config.num_patches());
        let tpos = g.constant(sinusoidal_positions(frames.t, self.config.hidden));
        let mut x = g.add(x, tpos);
        for block in &v.temporal {
            x = block.forward(g, x, None, reg, rng);
        }
        let x = v.norm.forward(g, x);
        let x = g.mean_rows(x);
        let x = v.proj.forward(g, x);
        Ok(g.l2_normalize(x))
    }

    /// Token ids fed to the text tower: truncated to `max_text_len`; an empty
    /// caption becomes a single padding token.
    pub fn text_ids(&self, caption: &str) -> Vec<usize> {
        let mut ids = Vocabulary::global().tokenize(caption);
        ids.truncate(self.config.max_text_len);
        if ids.is_empty() {
            ids.push(PAD);
        }
        ids
    }

    pub fn text_forward<R: Rng + ?Sized>(&self, g: &mut Graph, caption: &str, reg: Regularization, rng: &mut R) -> Var {
        let t = &self.text;
        let ids = self.text_ids(caption);
        let n = ids.len();
        let table = g.param(t.token_embed);
        let x = g.select_rows(table, ids);
        let pos = g.param(t.pos_embed);
        let pos = g.select_rows(pos, (0..n).collect());
        let mut x = g.add(x, pos);
        for block in &t.blocks {
            x = block.forward(g, x, None, reg, rng);
        }
        let x = t.norm.forward(g, x);
        let x = g.mean_rows(x);
        let x = t.proj.forward(g, x);
        g.l2_normalize(x)
    }

    pub fn encode_video(&self, frames: &Frames) -> Result<Embedding> {
        let mut g = Graph::with_params(&self.params, false);
        // eval mode draws no randomness
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = self.video_forward(&mut g, frames, Regularization::default(), &mut rng)?;
        Ok(Embedding { values: g.value(v).as_slice().to_vec() })
    }

    pub fn encode_text(&self, caption: &str) -> Embedding {
        let mut g = Graph::with_params(&self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = self.text_forward(&mut g, caption, Regularization::default(), &mut rng);
        Embedding { values: g.value(v).as_slice().to_vec() }
    }

    /// Row `i` is the embedding of `clips[i]`.
    pub fn encode_videos(&self, clips: &[Frames]) -> Result<Matrix> {
        let rows = clips.par_iter().map(|f| self.encode_video(f).map(|e| e.values)).collect::<Result<Vec<_>>>()?;
        Ok(embedding_matrix(rows, self.config.embed_dim))
    }

    pub fn encode_texts<S: AsRef<str> + Sync>(&self, captions: &[S]) -> Matrix {
        let rows: Vec<Vec<f64>> = captions.par_iter().map(|c| self.encode_text(c.as_ref()).values).collect();
        embedding_matrix(rows, self.config.embed_dim)
    }

    pub fn to_checkpoint(&self, state: TrainingState) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            params: self.params.clone(),
            state,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: EncoderConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Config(format!("encoder config in checkpoint: {e}")))?;
        let mut enc = Encoders::new(config)?;
        restore_params(&mut enc.params, &ckpt.params)?;
        Ok(enc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(TrainingState::default()).save(path)
    }
}

fn embedding_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Matrix {
    let n = rows.len();
    Matrix::from_vec(n, dim, rows.into_iter().flatten().collect())
}
