//! Procedural egocentric world: scripts, rendered clips and narration pairs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotations::{build_annotations, Annotations};
use super::filter::{score_pairs, FilterRules};
use super::render::render_clip;
use super::vocab::{render_template, NOUNS, VERBS};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub verb_id: usize,
    pub noun_id: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl ActionEntry {
    pub fn action_id(&self, num_nouns: usize) -> usize {
        self.verb_id * num_nouns + self.noun_id
    }
}

/// Ordered, non-overlapping actions inside one clip.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionScript {
    pub entries: Vec<ActionEntry>,
}

/// `T × H × W × C` frames stored as contiguous `u8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frames {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

impl Frames {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), t * h * w * c, "frame buffer size mismatch");
        Self { t, h, w, c, data }
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Frames {
        let n = self.frame_len();
        Frames::new(end - start, self.h, self.w, self.c, self.data[start * n..end * n].to_vec())
    }

    /// Frames at the given indices (repeats allowed).
    pub fn gather(&self, indices: &[usize]) -> Frames {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Frames::new(indices.len(), self.h, self.w, self.c, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Ego4d,
    Howto100m,
    Egoexolearn,
    Goalstep,
}

impl SourceTag {
    pub const ALL: [SourceTag; 4] =
        [SourceTag::Ego4d, SourceTag::Howto100m, SourceTag::Egoexolearn, SourceTag::Goalstep];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub video_id: String,
    pub frames: Frames,
    pub fps: f64,
    pub duration_s: f64,
    pub script: ActionScript,
}

impl Clip {
    pub fn frame_index(&self, time_s: f64) -> usize {
        ((time_s * self.fps).round() as usize).min(self.frames.t)
    }

    /// Frames covering `[start_s, end_s)`, at least one.
    pub fn frames_between(&self, start_s: f64, end_s: f64) -> Frames {
        let a = self.frame_index(start_s).min(self.frames.t.saturating_sub(1));
        let b = self.frame_index(end_s).clamp(a + 1, self.frames.t);
        self.frames.slice(a, b)
    }

    /// `count` frames sampled uniformly (segment centers) from `[start_s, end_s)`.
    pub fn sample_frames(&self, start_s: f64, end_s: f64, count: usize) -> Frames {
        let a = self.frame_index(start_s).min(self.frames.t.saturating_sub(1));
        let b = self.frame_index(end_s).clamp(a + 1, self.frames.t);
        let span = (b - a) as f64;
        let idx: Vec<usize> = (0..count)
            .map(|k| a + (((k as f64 + 0.5) * span / count as f64).floor() as usize).min(b - a - 1))
            .collect();
        self.frames.gather(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipTextPair {
    pub clip_id: String,
    pub caption: String,
    pub source: SourceTag,
    pub quality: f64,
    /// Narration interval inside the clip.
    pub start_s: f64,
    pub end_s: f64,
}

/// How consecutive actions inside a video are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SequenceModel {
    Uniform,
    /// With probability `habit` the fixed successor of the previous action, otherwise uniform.
    Markov {
        habit: f64,
    },
    /// Action `a + 1 (mod V·Nn)` always follows `a`.
    Cyclic,
}

/// Appearance shift used to build target domains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub hue_degrees: f64,
    pub speed: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { hue_degrees: 0.0, speed: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_clips: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub fps: f64,
    pub duration_s: (f64, f64),
    pub frame_size: (usize, usize, usize),
    pub actions_per_clip: (usize, usize),
    pub action_len_s: (f64, f64),
    pub templates: Vec<String>,
    pub caption_noise: f64,
    pub duplicate_rate: f64,
    pub clips_per_video: usize,
    pub sequence: SequenceModel,
    pub shift: DomainShift,
    /// Spacing between anticipation examples along a video's action stream.
    pub lta_stride: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_clips: 64,
            num_verbs: 4,
            num_nouns: 4,
            fps: 8.0,
            duration_s: (16.0, 24.0),
            frame_size: (16, 16, 3),
            actions_per_clip: (2, 3),
            action_len_s: (4.0, 8.0),
            templates: vec!["C {verb} the {noun}".into(), "C {verb} a {noun}".into(), "#C C {verb} the {noun}".into()],
            caption_noise: 0.1,
            duplicate_rate: 0.05,
            clips_per_video: 16,
            sequence: SequenceModel::Markov { habit: 0.7 },
            shift: DomainShift::default(),
            lta_stride: 4,
        }
    }
}

impl WorldConfig {
    /// The 256-clip multi-action world used for end-to-end runs.
    pub fn reference() -> Self {
        Self { num_clips: 256, ..Self::default() }
    }

    /// 256 short single-action clips, one narration each.
    pub fn pair_reference() -> Self {
        Self {
            num_clips: 256,
            duration_s: (3.0, 5.0),
            actions_per_clip: (1, 1),
            action_len_s: (2.0, 3.0),
            caption_noise: 0.0,
            duplicate_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_verbs * self.num_nouns
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_verbs < 2 || self.num_verbs > VERBS.len() {
            return bad(&format!("num_verbs must be in [2, {}]", VERBS.len()));
        }
        if self.num_nouns < 2 || self.num_nouns > NOUNS.len() {
            return bad(&format!("num_nouns must be in [2, {}]", NOUNS.len()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        let (h, w, c) = self.frame_size;
        if h < 4 || w < 4 || c == 0 {
            return bad("frames must be at least 4x4 with one channel");
        }
        if self.actions_per_clip.0 == 0 || self.actions_per_clip.0 > self.actions_per_clip.1 {
            return bad("actions_per_clip must be a nonempty positive range");
        }
        let (dmin, dmax) = self.duration_s;
        let (lmin, lmax) = self.action_len_s;
        if !(dmin > 0.0 && dmin <= dmax && lmin > 0.0 && lmin <= lmax) {
            return bad("duration and action length ranges must be positive and ordered");
        }
        if dmin < lmin || (lmin * self.fps).round() < 1.0 {
            return bad("clip duration cannot hold a single action interval");
        }
        if self.templates.is_empty() {
            return bad("at least one caption template is required");
        }
        if !(0.0..=1.0).contains(&self.caption_noise) || !(0.0..=1.0).contains(&self.duplicate_rate) {
            return bad("noise rates must be probabilities");
        }
        if self.clips_per_video == 0 || self.lta_stride == 0 {
            return bad("clips_per_video and lta_stride must be positive");
        }
        if let SequenceModel::Markov { habit } = self.sequence {
            if !(0.0..=1.0).contains(&habit) {
                return bad("markov habit must be a probability");
            }
        }
        if !(self.shift.speed > 0.0) {
            return bad("domain shift speed must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub clips: Vec<Clip>,
    pub pairs: Vec<ClipTextPair>,
    pub annotations: Annotations,
}

impl World {
    pub fn clip(&self, id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn clip_index(&self) -> std::collections::HashMap<&str, &Clip> {
        self.clips.iter().map(|c| (c.id.as_str(), c)).collect()
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

struct ScriptPlan {
    video: usize,
    frames: usize,
    script: ActionScript,
}

/// Successor table for the Markov sequence model.
fn habit_successors(cfg: &WorldConfig) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let n = cfg.num_actions();
    let mut rng = stream(cfg.seed, "successors", 0);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    // rotate the shuffled cycle so no action is its own successor
    let mut succ = vec![0; n];
    for i in 0..n {
        succ[perm[i]] = perm[(i + 1) % n];
    }
    succ
}

fn next_action<R: Rng>(cfg: &WorldConfig, succ: &[usize], prev: Option<usize>, rng: &mut R) -> usize {
    let n = cfg.num_actions();
    match (cfg.sequence, prev) {
        (_, None) | (SequenceModel::Uniform, _) => rng.random_range(0..n),
        (SequenceModel::Cyclic, Some(p)) => (p + 1) % n,
        (SequenceModel::Markov { habit }, Some(p)) => {
            if rng.random::<f64>() < habit {
                succ[p]
            } else {
                rng.random_range(0..n)
            }
        }
    }
}

fn plan_scripts(cfg: &WorldConfig) -> Vec<ScriptPlan> {
    let succ = habit_successors(cfg);
    let mut rng = stream(cfg.seed, "scripts", 0);
    let mut prev: Option<usize> = None;
    let mut plans = Vec::with_capacity(cfg.num_clips);
    for i in 0..cfg.num_clips {
        let video = i / cfg.clips_per_video;
        if i % cfg.clips_per_video == 0 {
            prev = None;
        }
        let fmin = (cfg.duration_s.0 * cfg.fps).round() as usize;
        let fmax = (cfg.duration_s.1 * cfg.fps).round() as usize;
        let total = rng.random_range(fmin..=fmax.max(fmin));
        let lmin = ((cfg.action_len_s.0 * cfg.fps).round() as usize).max(1);
        let lmax = ((cfg.action_len_s.1 * cfg.fps).round() as usize).max(lmin);
        let k = rng.random_range(cfg.actions_per_clip.0..=cfg.actions_per_clip.1);
        let mut lengths: Vec<usize> = (0..k).map(|_| rng.random_range(lmin..=lmax).min(total)).collect();
        while lengths.len() > 1 && lengths.iter().sum::<usize>() > total {
            lengths.pop();
        }
        let free = total - lengths.iter().sum::<usize>();
        let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.random_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut gaps = Vec::with_capacity(lengths.len());
        let mut last = 0;
        for &c in &cuts {
            gaps.push(c - last);
            last = c;
        }
        let mut entries = Vec::with_capacity(lengths.len());
        let mut cursor = 0;
        for (len, gap) in lengths.iter().zip(&gaps) {
            cursor += gap;
            let action = next_action(cfg, &succ, prev, &mut rng);
            prev = Some(action);
            entries.push(ActionEntry {
                verb_id: action / cfg.num_nouns,
                noun_id: action % cfg.num_nouns,
                start_s: cursor as f64 / cfg.fps,
                end_s: (cursor + len) as f64 / cfg.fps,
            });
            cursor += len;
        }
        plans.push(ScriptPlan { video, frames: total, script: ActionScript { entries } });
    }
    plans
}

/// Corrupts a caption the way scraped narrations go wrong.
fn corrupt_caption<R: Rng>(caption: &str, rng: &mut R) -> String {
    match rng.random_range(0..3) {
        0 => String::new(),
        1 => caption
            .split_whitespace()
            .enumerate()
            .map(|(i, t)| if i % 2 == 1 { format!("zq{}x", t.len()) } else { t.to_string() })
            .collect::<Vec<_>>()
            .join(" "),
        _ => caption.split_whitespace().next().unwrap_or_default().to_string(),
    }
}

/// Builds clips, narration pairs and per-track ground truth from `config`.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let plans = plan_scripts(config);
    let (h, w, c) = config.frame_size;
    let clips: Vec<Clip> = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| {
            let id = clip_id(i);
            let frames = render_clip(config, &plan.script, plan.frames, (h, w, c), i as u64);
            Clip {
                id,
                video_id: format!("video_{:04}", plan.video),
                frames,
                fps: config.fps,
                duration_s: plan.frames as f64 / config.fps,
                script: plan.script.clone(),
            }
        })
        .collect();

    let mut rng = stream(config.seed, "pairs", 0);
    let mut pairs = Vec::new();
    for clip in &clips {
        let source = SourceTag::ALL[rng.random_range(0..SourceTag::ALL.len())];
        for e in &clip.script.entries {
            let template = &config.templates[rng.random_range(0..config.templates.len())];
            let mut caption = render_template(template, e.verb_id, e.noun_id);
            if rng.random::<f64>() < config.caption_noise {
                caption = corrupt_caption(&caption, &mut rng);
            }
            let pair = ClipTextPair {
                clip_id: clip.id.clone(),
                caption,
                source,
                quality: 0.0,
                start_s: e.start_s,
                end_s: e.end_s,
            };
            let dup = rng.random::<f64>() < config.duplicate_rate;
            pairs.push(pair.clone());
            if dup {
                pairs.push(pair);
            }
        }
    }
    score_pairs(&mut pairs, &FilterRules::default());

    let annotations = build_annotations(config, &clips);
    Ok(World { config: config.clone(), clips, pairs, annotations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{noun_id, split_tokens, verb_id};

    fn small(seed: u64, n: usize) -> WorldConfig {
        WorldConfig { seed, num_clips: n, duration_s: (8.0, 10.0), action_len_s: (2.0, 3.0), ..WorldConfig::default() }
    }

    #[test]
    fn same_config_same_world() {
        let a = generate_world(&small(3, 6)).unwrap();
        let b = generate_world(&small(3, 6)).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&small(4, 6)).unwrap();
        assert_ne!(a.clips[0].frames, c.clips[0].frames);
    }

    #[test]
    fn empty_world() {
        let w = generate_world(&small(1, 0)).unwrap();
        assert!(w.clips.is_empty() && w.pairs.is_empty());
        assert!(w.annotations.is_empty());
    }

    #[test]
    fn rejects_unfittable_duration() {
        let cfg = WorldConfig { duration_s: (1.0, 2.0), action_len_s: (3.0, 4.0), ..WorldConfig::default() };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = WorldConfig { num_verbs: 1, ..WorldConfig::default() };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn scripts_respect_invariants() {
        let w = generate_world(&small(9, 20)).unwrap();
        for clip in &w.clips {
            assert_eq!(clip.frames.t, (clip.duration_s * clip.fps).round() as usize);
            let mut last_end = 0.0;
            for e in &clip.script.entries {
                assert!(e.start_s >= last_end && e.start_s < e.end_s && e.end_s <= clip.duration_s);
                last_end = e.end_s;
            }
        }
    }

    #[test]
    fn captions_match_scripts_exhaustively() {
        let cfg = WorldConfig { num_verbs: 3, num_nouns: 3, caption_noise: 0.0, ..small(5, 100) };
        let w = generate_world(&cfg).unwrap();
        let clips = w.clip_index();
        for pair in &w.pairs {
            let clip = clips[pair.clip_id.as_str()];
            let tokens: Vec<String> = split_tokens(&pair.caption).collect();
            let v = tokens.iter().find_map(|t| verb_id(t)).expect("verb in caption");
            let n = tokens.iter().find_map(|t| noun_id(t)).expect("noun in caption");
            assert!(v < 3 && n < 3);
            assert!(
                clip.script
                    .entries
                    .iter()
                    .any(|e| e.verb_id == v && e.noun_id == n && e.start_s == pair.start_s && e.end_s == pair.end_s),
                "caption {:?} not in script of {}",
                pair.caption,
                pair.clip_id
            );
        }
    }

    #[test]
    fn cyclic_sequences_increment() {
        let cfg = WorldConfig { sequence: SequenceModel::Cyclic, ..small(2, 8) };
        let w = generate_world(&cfg).unwrap();
        let actions: Vec<usize> =
            w.clips.iter().flat_map(|c| c.script.entries.iter().map(|e| e.action_id(cfg.num_nouns))).collect();
        for pair in actions.windows(2) {
            assert_eq!(pair[1], (pair[0] + 1) % cfg.num_actions());
        }
    }
}
