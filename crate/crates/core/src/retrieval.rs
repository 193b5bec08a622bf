//! Kitchen-style tracks on labelled action segments: verb/noun recognition,
//! multi-instance text-video retrieval and source-only domain adaptation.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{noun_id, split_tokens, verb_id};
use crate::corpus::{Clip, Frames, SegmentLabel, World};
use crate::encoders::{
    classification_report, post_pretrain, train_classifier, ClassificationReport, ClassifierConfig, ClassifierOutcome,
    Encoders, LabeledClip, PretrainConfig, PretrainOutcome, TrainingPair, VideoClassifier,
};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes};
use crate::metrics::average_precision;
use crate::tensor::{argmax, Matrix};

/// `Q×G` inner products of text rows against video rows. Both sides are
/// expected to be unit-norm, which puts every entry in `[-1, 1]`.
pub fn similarity_matrix(video: &Matrix, text: &Matrix) -> Result<Matrix> {
    if video.cols() != text.cols() {
        return Err(Error::Shape(format!("video dim {} vs text dim {}", video.cols(), text.cols())));
    }
    Ok(text.matmul_t(video))
}

/// Graded relevance of gallery items (columns) to queries (rows).
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix {
    pub values: Matrix,
    /// Captions without a recognisable verb or noun; their rows or columns are zero.
    pub unparsed: usize,
}

fn parse_caption(caption: &str) -> Option<(BTreeSet<usize>, BTreeSet<usize>)> {
    let mut verbs = BTreeSet::new();
    let mut nouns = BTreeSet::new();
    for t in split_tokens(caption) {
        if let Some(v) = verb_id(&t) {
            verbs.insert(v);
        }
        if let Some(n) = noun_id(&t) {
            nouns.insert(n);
        }
    }
    (!verbs.is_empty() && !nouns.is_empty()).then_some((verbs, nouns))
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Half the verb-set Jaccard plus half the noun-set Jaccard.
pub fn build_relevance(queries: &[&str], gallery: &[&str]) -> RelevanceMatrix {
    let q: Vec<_> = queries.iter().map(|c| parse_caption(c)).collect();
    let g: Vec<_> = gallery.iter().map(|c| parse_caption(c)).collect();
    let unparsed = q.iter().chain(&g).filter(|p| p.is_none()).count();
    for (c, p) in queries.iter().chain(gallery).zip(q.iter().chain(&g)) {
        if p.is_none() {
            log::warn!("caption {c:?} has no verb or noun; relevance set to zero");
        }
    }
    let mut values = Matrix::zeros(q.len(), g.len());
    for (i, qi) in q.iter().enumerate() {
        for (j, gj) in g.iter().enumerate() {
            if let (Some((qv, qn)), Some((gv, gn))) = (qi, gj) {
                values[(i, j)] = 0.5 * (jaccard(qv, gv) + jaccard(qn, gn));
            }
        }
    }
    RelevanceMatrix { values, unparsed }
}

/// Text-to-video and video-to-text scores plus their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalScores {
    pub t2v: f64,
    pub v2t: f64,
    pub avg: f64,
    /// Queries left out of the mean because nothing is relevant to them.
    pub excluded_t2v: usize,
    pub excluded_v2t: usize,
}

/// Column order of a row by descending score; ties keep gallery order.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    order
}

fn check_shapes(sim: &Matrix, rel: &Matrix) -> Result<()> {
    if sim.shape() != rel.shape() {
        return Err(Error::Shape(format!("similarity {:?} vs relevance {:?}", sim.shape(), rel.shape())));
    }
    if rel.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("relevance values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Mean of per-row scores, skipping rows where `score` returns `None`.
fn mean_over_rows(sim: &Matrix, rel: &Matrix, score: impl Fn(&[f64], &[f64]) -> Option<f64> + Sync) -> (f64, usize) {
    let per: Vec<Option<f64>> = (0..sim.rows()).into_par_iter().map(|r| score(sim.row(r), rel.row(r))).collect();
    let kept: Vec<f64> = per.iter().flatten().copied().collect();
    let excluded = per.len() - kept.len();
    let mean = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    (mean, excluded)
}

fn both_directions(
    sim: &Matrix,
    rel: &Matrix,
    score: impl Fn(&[f64], &[f64]) -> Option<f64> + Sync + Copy,
) -> Result<DirectionalScores> {
    check_shapes(sim, rel)?;
    let (t2v, excluded_t2v) = mean_over_rows(sim, rel, score);
    let (v2t, excluded_v2t) = mean_over_rows(&sim.transpose(), &rel.transpose(), score);
    Ok(DirectionalScores { t2v, v2t, avg: 0.5 * (t2v + v2t), excluded_t2v, excluded_v2t })
}

fn row_ap(sim: &[f64], rel: &[f64]) -> Option<f64> {
    if rel.iter().all(|&r| r <= 0.0) {
        return None;
    }
    let flags: Vec<bool> = ranking(sim).into_iter().map(|j| rel[j] > 0.0).collect();
    Some(average_precision(&flags))
}

fn row_ndcg(sim: &[f64], rel: &[f64]) -> Option<f64> {
    let dcg =
        |order: &[usize]| -> f64 { order.iter().enumerate().map(|(i, &j)| rel[j] / (i as f64 + 2.0).log2()).sum() };
    let ideal = dcg(&ranking(rel));
    (ideal > 0.0).then(|| dcg(&ranking(sim)) / ideal)
}

/// Mean AP with relevance binarised at `> 0`, in both directions.
pub fn retrieval_map(sim: &Matrix, rel: &RelevanceMatrix) -> Result<DirectionalScores> {
    both_directions(sim, &rel.values, row_ap)
}

/// Mean nDCG over the full ranking with graded gains, in both directions.
pub fn retrieval_ndcg(sim: &Matrix, rel: &RelevanceMatrix) -> Result<DirectionalScores> {
    both_directions(sim, &rel.values, row_ndcg)
}

/// Fraction of rows whose paired column (same index) ranks in the top `k`.
pub fn paired_recall_at_k(sim: &Matrix, k: usize) -> Result<f64> {
    if sim.rows() != sim.cols() || sim.rows() == 0 {
        return Err(Error::Shape(format!("paired recall needs a nonempty square matrix, got {:?}", sim.shape())));
    }
    let hits = (0..sim.rows()).filter(|&r| ranking(sim.row(r)).iter().take(k).any(|&c| c == r)).count();
    Ok(hits as f64 / sim.rows() as f64)
}

/// One captioned action segment used as both query and gallery item.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalItem {
    pub id: String,
    pub frames: Frames,
    pub caption: String,
}

impl RetrievalItem {
    pub fn from_segments(
        segments: &[SegmentLabel],
        clips: &[Clip],
        frames_per_item: usize,
    ) -> Result<Vec<RetrievalItem>> {
        let index: std::collections::HashMap<&str, &Clip> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
        segments
            .iter()
            .map(|s| {
                let clip = index
                    .get(s.clip_id.as_str())
                    .ok_or_else(|| Error::Invariant(format!("segment {} references unknown clip", s.item_id)))?;
                Ok(RetrievalItem {
                    id: s.item_id.clone(),
                    frames: clip.sample_frames(s.start_s, s.end_s, frames_per_item),
                    caption: s.caption.clone(),
                })
            })
            .collect()
    }

    pub fn to_pair(&self) -> TrainingPair {
        TrainingPair { frames: self.frames.clone(), caption: self.caption.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: DirectionalScores,
    pub ndcg: DirectionalScores,
}

/// Embeds every item with `enc`, queries with captions against all videos
/// and scores against caption-derived relevance.
pub fn evaluate_retrieval(enc: &Encoders, items: &[RetrievalItem]) -> Result<RetrievalReport> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let frames: Vec<Frames> = items.iter().map(|i| i.frames.clone()).collect();
    let captions: Vec<&str> = items.iter().map(|i| i.caption.as_str()).collect();
    let sim = similarity_matrix(&enc.encode_videos(&frames)?, &enc.encode_texts(&captions))?;
    let rel = build_relevance(&captions, &captions);
    Ok(RetrievalReport { map: retrieval_map(&sim, &rel)?, ndcg: retrieval_ndcg(&sim, &rel)? })
}

/// Fine-tuning schedule for retrieval.
pub fn retrieval_finetune_config() -> PretrainConfig {
    PretrainConfig { epochs: 50, lr: 1e-5, batch: 8, warmup_epochs: 1, ..PretrainConfig::default() }
}

/// Fewer epochs at a larger step size for the synthetic corpora.
pub fn retrieval_finetune_desk() -> PretrainConfig {
    PretrainConfig { epochs: 6, lr: 1e-3, batch: 8, warmup_epochs: 1, ..PretrainConfig::default() }
}

/// Continues contrastive training of both towers on task pairs. With zero
/// epochs the result equals `init`, which is the zero-shot model.
pub fn finetune_retrieval(init: &Encoders, items: &[RetrievalItem], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let pairs: Vec<TrainingPair> = items.iter().map(RetrievalItem::to_pair).collect();
    post_pretrain(init, &pairs, cfg)
}

/// Verb/noun heads on the stage-2 video tower trained with cross-entropy.
pub fn recognize_train(
    backbone: &Encoders,
    items: &[LabeledClip],
    num_verbs: usize,
    num_nouns: usize,
    cfg: &ClassifierConfig,
) -> Result<ClassifierOutcome> {
    train_classifier(backbone, items, num_verbs, num_nouns, cfg)
}

/// Recognition output of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionPrediction {
    pub clip_id: String,
    pub verb_id: usize,
    pub noun_id: usize,
}

pub fn predictions_from_logits(ids: &[String], verbs: &Matrix, nouns: &Matrix) -> Result<Vec<RecognitionPrediction>> {
    if ids.len() != verbs.rows() || ids.len() != nouns.rows() {
        return Err(Error::Shape(format!("{} ids for {}/{} logit rows", ids.len(), verbs.rows(), nouns.rows())));
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(r, id)| RecognitionPrediction {
            clip_id: id.clone(),
            verb_id: argmax(verbs.row(r)),
            noun_id: argmax(nouns.row(r)),
        })
        .collect())
}

/// `clip_id,verb_id,noun_id` with a header row.
pub fn write_recognition_csv(path: &Path, preds: &[RecognitionPrediction]) -> Result<()> {
    let mut text = String::from("clip_id,verb_id,noun_id\n");
    for p in preds {
        if p.clip_id.contains([',', '\n']) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("clip id {:?} cannot be written to csv", p.clip_id),
            });
        }
        writeln!(text, "{},{},{}", p.clip_id, p.verb_id, p.noun_id).expect("writing to a string");
    }
    write_bytes(path, text.as_bytes())
}

pub fn read_recognition_csv(path: &Path) -> Result<Vec<RecognitionPrediction>> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some("clip_id,verb_id,noun_id") {
        return Err(bad("missing header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(format!("line {} has {} columns", i + 2, cols.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
            Ok(RecognitionPrediction { clip_id: cols[0].to_string(), verb_id: num(cols[1])?, noun_id: num(cols[2])? })
        })
        .collect()
}

/// Recognition logits of labelled items and the resulting accuracies.
pub fn evaluate_recognition(
    model: &VideoClassifier,
    items: &[LabeledClip],
) -> Result<(Matrix, Matrix, ClassificationReport)> {
    let frames: Vec<Frames> = items.iter().map(|i| i.frames.clone()).collect();
    let (v, n) = model.classify_clips(&frames)?;
    let verbs: Vec<usize> = items.iter().map(|i| i.verb).collect();
    let nouns: Vec<usize> = items.iter().map(|i| i.noun).collect();
    let report = classification_report(&v, &n, &verbs, &nouns)?;
    Ok((v, n, report))
}

/// A labelled source item or an unlabelled target item.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainItem {
    pub id: String,
    pub clip: LabeledClip,
}

/// Target-domain labels. While any [`TrainingSeal`] of the owning split is
/// alive they cannot be read.
#[derive(Clone, Debug)]
pub struct HeldOutLabels {
    verbs: Vec<usize>,
    nouns: Vec<usize>,
    seals: Arc<AtomicUsize>,
}

impl HeldOutLabels {
    pub fn read(&self) -> Result<(&[usize], &[usize])> {
        if self.seals.load(Ordering::SeqCst) > 0 {
            return Err(Error::FirewallViolation);
        }
        Ok((&self.verbs, &self.nouns))
    }
}

/// Marks a split as in training for as long as it lives.
pub struct TrainingSeal {
    seals: Arc<AtomicUsize>,
}

impl Drop for TrainingSeal {
    fn drop(&mut self) {
        self.seals.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Labelled source clips and unlabelled target clips with disjoint ids.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    source: Vec<LabeledClip>,
    source_ids: Vec<String>,
    target_ids: Vec<String>,
    target_frames: Vec<Frames>,
    target_labels: HeldOutLabels,
}

impl DomainSplit {
    pub fn new(source: Vec<DomainItem>, target: Vec<DomainItem>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let ids: HashSet<&str> = source.iter().map(|s| s.id.as_str()).collect();
        if let Some(t) = target.iter().find(|t| ids.contains(t.id.as_str())) {
            return Err(Error::Config(format!("item {} is in both domains", t.id)));
        }
        let labels = HeldOutLabels {
            verbs: target.iter().map(|t| t.clip.verb).collect(),
            nouns: target.iter().map(|t| t.clip.noun).collect(),
            seals: Arc::new(AtomicUsize::new(0)),
        };
        Ok(Self {
            source_ids: source.iter().map(|s| s.id.clone()).collect(),
            source: source.into_iter().map(|s| s.clip).collect(),
            target_ids: target.iter().map(|t| t.id.clone()).collect(),
            target_frames: target.into_iter().map(|t| t.clip.frames).collect(),
            target_labels: labels,
        })
    }

    /// Segments of two worlds, prefixed `src/` and `tgt/` so ids never collide.
    pub fn from_worlds(source: &World, target: &World, frames_per_clip: usize) -> Result<Self> {
        let items = |w: &World, prefix: &str| -> Result<Vec<DomainItem>> {
            let clips = LabeledClip::from_segments(&w.annotations.segments, &w.clips, frames_per_clip)?;
            Ok(w.annotations
                .segments
                .iter()
                .zip(clips)
                .map(|(s, clip)| DomainItem { id: format!("{prefix}/{}", s.item_id), clip })
                .collect())
        };
        Self::new(items(source, "src")?, items(target, "tgt")?)
    }

    pub fn source(&self) -> &[LabeledClip] {
        &self.source
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn target_ids(&self) -> &[String] {
        &self.target_ids
    }

    pub fn target_frames(&self) -> &[Frames] {
        &self.target_frames
    }

    pub fn target_labels(&self) -> &HeldOutLabels {
        &self.target_labels
    }

    /// Blocks label reads until the returned seal is dropped.
    pub fn seal(&self) -> TrainingSeal {
        self.target_labels.seals.fetch_add(1, Ordering::SeqCst);
        TrainingSeal { seals: Arc::clone(&self.target_labels.seals) }
    }
}

/// Recognition training on the source domain only; target labels stay
/// sealed for the whole run.
pub fn domain_adapt_train(
    split: &DomainSplit,
    backbone: &Encoders,
    num_verbs: usize,
    num_nouns: usize,
    cfg: &ClassifierConfig,
) -> Result<ClassifierOutcome> {
    let _seal = split.seal();
    recognize_train(backbone, split.source(), num_verbs, num_nouns, cfg)
}

/// Accuracy on the target domain; the only consumer of held-out labels.
pub fn evaluate_target(split: &DomainSplit, model: &VideoClassifier) -> Result<ClassificationReport> {
    let (verbs, nouns) = split.target_labels().read()?;
    let (v, n) = model.classify_clips(split.target_frames())?;
    classification_report(&v, &n, verbs, nouns)
}

#[cfg(test)]
mod tests;
