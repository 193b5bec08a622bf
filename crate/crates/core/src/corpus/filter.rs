//! Pair quality scoring, deduplication and source mixing.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::vocab::{split_tokens, Vocabulary};
use super::world::{ClipTextPair, SourceTag};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Caption quality rules. Hard rules (empty caption, token count outside
/// `[min_tokens, max_tokens]`, in-vocabulary fraction below
/// `min_vocab_fraction`) score 0; otherwise
/// `score = (1 - vocab_weight + vocab_weight * vocab_fraction) * (1 - duplicate_penalty)^dup`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_vocab_fraction: f64,
    pub vocab_weight: f64,
    pub duplicate_penalty: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self { min_tokens: 2, max_tokens: 16, min_vocab_fraction: 0.25, vocab_weight: 0.5, duplicate_penalty: 0.5 }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("token bounds must satisfy 1 <= min <= max".into()));
        }
        if !(self.min_vocab_fraction > 0.0 && self.min_vocab_fraction <= 1.0) {
            return Err(Error::Config("min_vocab_fraction must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.vocab_weight) || !(0.0..1.0).contains(&self.duplicate_penalty) {
            return Err(Error::Config("vocab_weight in [0,1] and duplicate_penalty in [0,1) required".into()));
        }
        Ok(())
    }
}

pub fn score_pair(pair: &ClipTextPair, rules: &FilterRules, is_duplicate: bool) -> f64 {
    let vocab = Vocabulary::global();
    let tokens: Vec<String> = split_tokens(&pair.caption).collect();
    if tokens.is_empty() || tokens.len() < rules.min_tokens || tokens.len() > rules.max_tokens {
        return 0.0;
    }
    let known = tokens.iter().filter(|t| vocab.contains(t)).count();
    let fraction = known as f64 / tokens.len() as f64;
    if fraction < rules.min_vocab_fraction {
        return 0.0;
    }
    let mut score = 1.0 - rules.vocab_weight + rules.vocab_weight * fraction;
    if is_duplicate {
        score *= 1.0 - rules.duplicate_penalty;
    }
    score.clamp(0.0, 1.0)
}

/// Assigns `quality` to every pair; a pair is a duplicate when an earlier
/// pair has the same clip and caption.
pub fn score_pairs(pairs: &mut [ClipTextPair], rules: &FilterRules) {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for pair in pairs.iter_mut() {
        let dup = !seen.insert((pair.clip_id.clone(), pair.caption.clone()));
        pair.quality = score_pair(pair, rules, dup);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub threshold: f64,
    /// Relative keep rate per source; missing sources weigh 1.
    pub mix_weights: BTreeMap<SourceTag, f64>,
    pub seed: u64,
    pub require_nonempty: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { threshold: 0.5, mix_weights: BTreeMap::new(), seed: 0, require_nonempty: true }
    }
}

impl SelectionConfig {
    fn weight(&self, source: SourceTag) -> f64 {
        self.mix_weights.get(&source).copied().unwrap_or(1.0)
    }
}

/// Keeps pairs with `quality >= threshold`, drops repeated captions per clip
/// (first occurrence wins), then subsamples each source to
/// `round(n_source * w_source / max_w)` pairs. Output preserves input order.
pub fn select_corpus(pairs: &[ClipTextPair], cfg: &SelectionConfig) -> Result<Vec<ClipTextPair>> {
    if cfg.mix_weights.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Config("mix weights must be nonnegative".into()));
    }
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let kept: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.quality >= cfg.threshold)
        .filter(|(_, p)| seen.insert((p.clip_id.as_str(), p.caption.as_str())))
        .map(|(i, _)| i)
        .collect();

    let max_w = SourceTag::ALL.iter().map(|&s| cfg.weight(s)).fold(0.0, f64::max);
    let mut by_source: BTreeMap<SourceTag, Vec<usize>> = BTreeMap::new();
    for &i in &kept {
        by_source.entry(pairs[i].source).or_default().push(i);
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(kept.len());
    for (k, (source, mut idx)) in by_source.into_iter().enumerate() {
        let rate = if max_w > 0.0 { cfg.weight(source) / max_w } else { 0.0 };
        let target = (idx.len() as f64 * rate).round() as usize;
        if target < idx.len() {
            let mut rng = stream(cfg.seed, "select", k as u64);
            idx.shuffle(&mut rng);
            idx.truncate(target);
        }
        chosen.extend(idx);
    }
    chosen.sort_unstable();
    if chosen.is_empty() && cfg.require_nonempty {
        return Err(Error::EmptyCorpus);
    }
    Ok(chosen.into_iter().map(|i| pairs[i].clone()).collect())
}
