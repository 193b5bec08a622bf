//! Stage runners. Each full stage clears its directory, runs its steps and
//! writes the manifest; the steps are public so the command-line verbs can
//! run them one at a time.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::manifest::{config_hash, list_artifacts, record};
use super::report::render_report;
use super::{Manifest, MetricRows, RunConfig, Stage, MANIFEST_FILE};
use crate::anticipation::{
    classify_histories, eval_candidates, predict_candidates, train_forecaster, ActionForecaster, AnticipationExample,
    CandidateRecord,
};
use crate::checkpoint::Checkpoint;
use crate::corpus::{
    generate_world, load_world, read_manifest, save_world, select_corpus, write_manifest, AnticipationAnnotation,
    GroundingAnnotation, SegmentLabel, World, WorldConfig,
};
use crate::encoders::{
    classification_report, post_pretrain, train_classifier, ClassificationReport, Encoders, LabeledClip, TrainingPair,
};
use crate::ensemble::{
    average_logits, merge_grounding_predictions, merge_moment_predictions, uniform_weights, LogitBundle,
};
use crate::error::{Error, Result};
use crate::features::{
    extract_tracks, load_tracks, save_tracks, write_embeddings, SnippetFeatureTrack, SNIPPET_LEN, SNIPPET_STRIDE,
};
use crate::grounding::{
    eval_grounding, predict_grounding, queries_from_annotations, train_grounding, GroundingModel, GroundingPrediction,
    GroundingQuery, RECALL_KS, RECALL_TIOUS,
};
use crate::io::{ensure_dir, read_json, read_jsonl, write_bytes, write_json, write_jsonl};
use crate::metrics::topk_accuracy;
use crate::moments::{
    average_map, ensemble_detections, predict_moments, train_moments, MomentModel, MomentPrediction, MAP_TIOUS,
};
use crate::retrieval::{
    domain_adapt_train, evaluate_retrieval, evaluate_target, finetune_retrieval, predictions_from_logits,
    write_recognition_csv, DirectionalScores, DomainSplit, RetrievalItem,
};
use crate::tensor::Matrix;

/// A loaded config bound to an output root. Construction applies the run
/// seed to every block.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub root: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, root: impl Into<PathBuf>) -> Self {
        let mut c = config;
        let s = c.seed;
        c.world.seed = s;
        c.selection.seed = s;
        c.encoder.seed = s;
        c.pretrain.seed = s;
        c.nlq.model.seed = s;
        c.goalstep.model.seed = s;
        c.mq.model.seed = s;
        c.lta.classifier.seed = s;
        c.lta.forecaster.seed = s;
        c.ek_ar.classifier.seed = s;
        c.ek_mir.finetune.seed = s;
        c.ek_uda.classifier.seed = s;
        Self { config: c, root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(MANIFEST_FILE)
    }

    /// Fails with the nearest upstream stage whose manifest is absent.
    pub fn require(&self, stage: Stage) -> Result<()> {
        for &up in stage.upstream() {
            let path = self.manifest_path(up);
            if !path.is_file() {
                return Err(Error::MissingDependency { stage: up.name().to_string(), path });
            }
        }
        Ok(())
    }

    fn require_file(&self, stage: Stage, path: PathBuf) -> Result<PathBuf> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingDependency { stage: stage.name().to_string(), path })
        }
    }

    fn world_dir(&self) -> PathBuf {
        self.stage_dir(Stage::Corpus).join("world")
    }

    pub fn world(&self) -> Result<World> {
        load_world(&self.world_dir())
    }

    pub fn encoders(&self) -> Result<Encoders> {
        let path = self.require_file(Stage::Pretrain, self.stage_dir(Stage::Pretrain).join("encoders.ckpt"))?;
        Encoders::from_checkpoint(&Checkpoint::load(&path)?)
    }

    pub fn tracks(&self) -> Result<Vec<SnippetFeatureTrack>> {
        let path = self
            .require_file(Stage::Pretrain, self.stage_dir(Stage::Pretrain).join("features").join("manifest.jsonl"))?;
        load_tracks(&path)
    }

    fn stage_config(&self, stage: Stage) -> Result<serde_json::Value> {
        let c = &self.config;
        let block = match stage {
            Stage::Corpus => serde_json::json!({
                "world": c.world, "selection": c.selection,
                "shift": c.ek_uda.shift, "target_clips": c.ek_uda.target_clips,
            }),
            Stage::Pretrain => serde_json::json!({ "encoder": c.encoder, "pretrain": c.pretrain }),
            Stage::Nlq => serde_json::to_value(&c.nlq)?,
            Stage::Goalstep => serde_json::to_value(&c.goalstep)?,
            Stage::Mq => serde_json::to_value(&c.mq)?,
            Stage::Lta => serde_json::to_value(&c.lta)?,
            Stage::EkAr => serde_json::to_value(&c.ek_ar)?,
            Stage::EkMir => serde_json::to_value(&c.ek_mir)?,
            Stage::EkUda => serde_json::to_value(&c.ek_uda)?,
            Stage::Ensemble => serde_json::json!({ "ensemble": c.ensemble, "members": c.nlq.members }),
            Stage::Report => serde_json::Value::Null,
        };
        Ok(serde_json::json!({
            "stage": stage.name(),
            "profile": c.profile,
            "seed": c.seed,
            "test_fraction": c.test_fraction,
            "config": block,
        }))
    }

    /// Writes the stage manifest. With `merge`, rows of an existing manifest
    /// produced under the same config are kept unless replaced.
    pub fn finalize(&self, stage: Stage, track: &str, rows: MetricRows, merge: bool) -> Result<Manifest> {
        let dir = self.stage_dir(stage);
        let path = dir.join(MANIFEST_FILE);
        let config_hash = config_hash(&self.stage_config(stage)?)?;
        let mut metrics = MetricRows::new();
        if merge && path.is_file() {
            match Manifest::load(&path) {
                Ok(old) if old.config_hash == config_hash => metrics = old.metrics,
                Ok(_) => {}
                Err(e) => warn!("replacing unreadable manifest {}: {e}", path.display()),
            }
        }
        metrics.extend(rows);
        let inputs = stage
            .upstream()
            .iter()
            .map(|&up| self.manifest_path(up))
            .filter(|p| p.is_file())
            .map(|p| record(&self.root, &p))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            stage: stage.name().to_string(),
            track: track.to_string(),
            profile: self.config.profile,
            seed: self.config.seed,
            config_hash,
            inputs,
            artifacts: list_artifacts(&self.root, &dir)?,
            metrics,
        };
        manifest.save(&path)?;
        Ok(manifest)
    }

    fn fresh_dir(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        ensure_dir(&dir)?;
        Ok(dir)
    }

    fn step_dir(&self, stage: Stage) -> Result<PathBuf> {
        self.require(stage)?;
        let dir = self.stage_dir(stage);
        ensure_dir(&dir)?;
        Ok(dir)
    }
}

/// Held-out videos: the last `round(n · test_fraction)` video ids in sorted
/// order, at least one and leaving at least one for training.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSplit {
    pub train_videos: BTreeSet<String>,
    pub test_videos: BTreeSet<String>,
    pub train_clips: HashSet<String>,
    pub test_clips: HashSet<String>,
}

impl VideoSplit {
    pub fn new(world: &World, test_fraction: f64) -> Result<Self> {
        let videos: BTreeSet<&str> = world.clips.iter().map(|c| c.video_id.as_str()).collect();
        if videos.len() < 2 {
            return Err(Error::Config(format!("a train/test split needs two videos, the world has {}", videos.len())));
        }
        let n_test = ((videos.len() as f64 * test_fraction).round() as usize).clamp(1, videos.len() - 1);
        let cut = videos.len() - n_test;
        let train_videos: BTreeSet<String> = videos.iter().take(cut).map(|v| v.to_string()).collect();
        let test_videos: BTreeSet<String> = videos.iter().skip(cut).map(|v| v.to_string()).collect();
        let mut split = Self { train_videos, test_videos, train_clips: HashSet::new(), test_clips: HashSet::new() };
        for c in &world.clips {
            if split.test_videos.contains(&c.video_id) {
                split.test_clips.insert(c.id.clone());
            } else {
                split.train_clips.insert(c.id.clone());
            }
        }
        Ok(split)
    }

    fn is_test(&self, clip_id: &str) -> bool {
        self.test_clips.contains(clip_id)
    }

    fn segments(&self, world: &World, test: bool) -> Vec<SegmentLabel> {
        world.annotations.segments.iter().filter(|s| self.is_test(&s.clip_id) == test).cloned().collect()
    }

    fn queries(&self, anns: &[GroundingAnnotation], test: bool) -> Vec<GroundingQuery> {
        let kept: Vec<GroundingAnnotation> =
            anns.iter().filter(|a| self.is_test(&a.clip_id) == test).cloned().collect();
        queries_from_annotations(&kept)
    }

    fn anticipation(&self, world: &World, test: bool) -> Vec<AnticipationAnnotation> {
        world
            .annotations
            .anticipation
            .iter()
            .filter(|a| self.test_videos.contains(&a.video_id) == test)
            .cloned()
            .collect()
    }
}

fn split(ctx: &Context, world: &World) -> Result<VideoSplit> {
    VideoSplit::new(world, ctx.config.test_fraction)
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn row<const N: usize>(cells: [(&str, f64); N]) -> BTreeMap<String, f64> {
    cells.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn member_label(stage: Stage, i: usize, members: usize) -> String {
    if members == 1 {
        stage.name().to_string()
    } else {
        format!("{} #{i}", stage.name())
    }
}

// ---- corpus ----

pub fn corpus(ctx: &Context) -> Result<Manifest> {
    let dir = ctx.fresh_dir(Stage::Corpus)?;
    let cfg = &ctx.config;
    let world = generate_world(&cfg.world)?;
    save_world(&world, &dir.join("world"))?;
    let selected = select_corpus(&world.pairs, &cfg.selection)?;
    write_manifest(&dir.join("selected.jsonl"), &selected)?;
    let target_cfg = WorldConfig {
        seed: cfg.world.seed ^ 0x5eed_7a59,
        num_clips: cfg.ek_uda.target_clips,
        shift: cfg.ek_uda.shift,
        ..cfg.world.clone()
    };
    let target = generate_world(&target_cfg)?;
    save_world(&target, &dir.join("target"))?;
    info!("corpus: {} clips, {} of {} pairs selected", world.clips.len(), selected.len(), world.pairs.len());
    let rows = MetricRows::from([(
        "corpus".to_string(),
        row([
            ("Clips", world.clips.len() as f64),
            ("Pairs", world.pairs.len() as f64),
            ("Selected", selected.len() as f64),
            ("Target clips", target.clips.len() as f64),
        ]),
    )]);
    ctx.finalize(Stage::Corpus, "corpus", rows, false)
}

// ---- stage 2 ----

/// Contrastive post-pretraining on the selected pairs of training videos,
/// then snippet features for every clip.
pub fn pretrain(ctx: &Context) -> Result<Manifest> {
    ctx.require(Stage::Pretrain)?;
    let world = ctx.world()?;
    let dir = ctx.fresh_dir(Stage::Pretrain)?;
    let cfg = &ctx.config;
    let sp = split(ctx, &world)?;
    let selected = read_manifest(&ctx.stage_dir(Stage::Corpus).join("selected.jsonl"))?;
    let train: Vec<_> = selected.into_iter().filter(|p| !sp.is_test(&p.clip_id)).collect();
    let pairs = TrainingPair::from_corpus(&train, &world.clips, cfg.pretrain.frames_per_pair)?;
    let out = post_pretrain(&Encoders::new(cfg.encoder.clone())?, &pairs, &cfg.pretrain)?;
    out.checkpoint().save(&dir.join("encoders.ckpt"))?;
    let tracks = extract_tracks(&world.clips, &out.encoders, SNIPPET_LEN, SNIPPET_STRIDE)?;
    save_tracks(&dir.join("features"), &tracks)?;
    let losses = &out.state.epoch_losses;
    let mut cells = row([("Pairs", pairs.len() as f64), ("Temperature", out.encoders.temperature())]);
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        cells.insert("First loss".into(), *first);
        cells.insert("Last loss".into(), *last);
    }
    ctx.finalize(Stage::Pretrain, "pretrain", MetricRows::from([("stage 2".to_string(), cells)]), false)
}

// ---- grounding ----

fn grounding_parts(
    ctx: &Context,
    stage: Stage,
) -> Result<(&super::GroundingTrack, fn(&World) -> &[GroundingAnnotation])> {
    match stage {
        Stage::Nlq => Ok((&ctx.config.nlq, |w| &w.annotations.nlq)),
        Stage::Goalstep => Ok((&ctx.config.goalstep, |w| &w.annotations.goalstep)),
        _ => Err(Error::Config(format!("{stage} is not a grounding stage"))),
    }
}

/// Trains every member on the training-video queries.
pub fn grounding_train(ctx: &Context, stage: Stage) -> Result<()> {
    let (track, anns) = grounding_parts(ctx, stage)?;
    let dir = ctx.step_dir(stage)?;
    let world = ctx.world()?;
    let tracks = ctx.tracks()?;
    let sp = split(ctx, &world)?;
    let fine = sp.queries(anns(&world), false);
    let pre = track.narration_pretraining.then(|| {
        let mut q = sp.queries(&world.annotations.naq, false);
        if let Some(max) = track.max_pretrain_queries {
            q.truncate(max);
        }
        q
    });
    for i in 0..track.members {
        let cfg = crate::grounding::GroundingConfig { seed: track.model.seed + i as u64, ..track.model.clone() };
        let out = train_grounding(pre.as_deref(), &fine, &tracks, &cfg)?;
        info!("{stage} member {i}: trained on {} queries", fine.len());
        out.model.save(&dir.join(format!("model_{i}.ckpt")), out.state)?;
    }
    Ok(())
}

/// Predicts the held-out queries with every member and scores them.
pub fn grounding_eval(ctx: &Context, stage: Stage) -> Result<Manifest> {
    let (track, anns) = grounding_parts(ctx, stage)?;
    let dir = ctx.step_dir(stage)?;
    let world = ctx.world()?;
    let tracks = ctx.tracks()?;
    let test = split(ctx, &world)?.queries(anns(&world), true);
    write_jsonl(&dir.join("test_queries.jsonl"), &test)?;
    let mut rows = MetricRows::new();
    for i in 0..track.members {
        let model = GroundingModel::load(&ctx.require_file(stage, dir.join(format!("model_{i}.ckpt")))?)?;
        let preds = predict_grounding(&model, &test, &tracks)?;
        write_jsonl(&dir.join(format!("predictions_{i}.jsonl")), &preds)?;
        rows.insert(member_label(stage, i, track.members), recall_row(&preds, &test)?);
    }
    ctx.finalize(stage, stage.name(), rows, false)
}

fn recall_row(preds: &[GroundingPrediction], gt: &[GroundingQuery]) -> Result<BTreeMap<String, f64>> {
    let table = eval_grounding(preds, gt, &RECALL_KS, &RECALL_TIOUS)?;
    Ok(table.cells().into_iter().map(|(k, v)| (k, pct(v))).collect())
}

// ---- moment queries ----

fn test_tracks_and_durations(
    world: &World,
    sp: &VideoSplit,
    tracks: Vec<SnippetFeatureTrack>,
) -> (Vec<SnippetFeatureTrack>, HashMap<String, f64>) {
    let durations = world.clips.iter().map(|c| (c.id.clone(), c.duration_s)).collect();
    (tracks.into_iter().filter(|t| sp.is_test(&t.clip_id)).collect(), durations)
}

pub fn mq_train(ctx: &Context) -> Result<()> {
    let dir = ctx.step_dir(Stage::Mq)?;
    let world = ctx.world()?;
    let tracks = ctx.tracks()?;
    let sp = split(ctx, &world)?;
    let anns: Vec<_> = world.annotations.moments.iter().filter(|a| !sp.is_test(&a.clip_id)).cloned().collect();
    let track = &ctx.config.mq;
    for i in 0..track.members {
        let cfg = crate::moments::MomentsConfig { seed: track.model.seed + i as u64, ..track.model.clone() };
        let out = train_moments(&anns, &tracks, world.config.num_verbs, &cfg)?;
        info!("mq member {i}: trained on {} annotations", anns.len());
        out.model.save(&dir.join(format!("model_{i}.ckpt")), out.state)?;
    }
    Ok(())
}

fn load_mq_members(ctx: &Context) -> Result<Vec<MomentModel>> {
    let dir = ctx.stage_dir(Stage::Mq);
    (0..ctx.config.mq.members)
        .map(|i| MomentModel::load(&ctx.require_file(Stage::Mq, dir.join(format!("model_{i}.ckpt")))?))
        .collect()
}

fn map_row(
    preds: &[MomentPrediction],
    gt: &[crate::corpus::MomentAnnotation],
    num_classes: usize,
) -> Result<BTreeMap<String, f64>> {
    let report = average_map(preds, gt, num_classes, &MAP_TIOUS)?;
    let mut cells: BTreeMap<String, f64> =
        report.tious.iter().zip(&report.per_threshold).map(|(t, v)| (format!("mAP@{t}"), pct(*v))).collect();
    cells.insert("Avg mAP".into(), pct(report.average_map));
    cells.insert("R1@0.5".into(), pct(report.r1_at_05));
    Ok(cells)
}

pub fn mq_eval(ctx: &Context) -> Result<Manifest> {
    let dir = ctx.step_dir(Stage::Mq)?;
    let world = ctx.world()?;
    let sp = split(ctx, &world)?;
    let (tracks, durations) = test_tracks_and_durations(&world, &sp, ctx.tracks()?);
    let gt: Vec<_> = world.annotations.moments.iter().filter(|a| sp.is_test(&a.clip_id)).cloned().collect();
    let members = load_mq_members(ctx)?;
    let mut rows = MetricRows::new();
    for (i, model) in members.iter().enumerate() {
        let preds = predict_moments(model, &tracks, &durations)?;
        write_jsonl(&dir.join(format!("predictions_{i}.jsonl")), &preds)?;
        rows.insert(member_label(Stage::Mq, i, members.len()), map_row(&preds, &gt, world.config.num_verbs)?);
    }
    ctx.finalize(Stage::Mq, "mq", rows, true)
}

/// Averages the members' head outputs per clip before decoding.
pub fn mq_ensemble(ctx: &Context) -> Result<Manifest> {
    let dir = ctx.step_dir(Stage::Mq)?;
    let world = ctx.world()?;
    let sp = split(ctx, &world)?;
    let (tracks, durations) = test_tracks_and_durations(&world, &sp, ctx.tracks()?);
    let gt: Vec<_> = world.annotations.moments.iter().filter(|a| sp.is_test(&a.clip_id)).cloned().collect();
    let members = load_mq_members(ctx)?;
    let cfg = members[0].config().clone();
    let mut preds = Vec::new();
    for t in &tracks {
        let duration = durations[&t.clip_id];
        let outputs = members.iter().map(|m| m.detect_moments(t, duration)).collect::<Result<Vec<_>>>()?;
        preds.extend(ensemble_detections(&outputs)?.predictions(cfg.nms_sigma, cfg.score_floor, cfg.max_candidates)?);
    }
    write_jsonl(&dir.join("predictions_ensemble.jsonl"), &preds)?;
    let rows = MetricRows::from([("mq ensemble".to_string(), map_row(&preds, &gt, world.config.num_verbs)?)]);
    ctx.finalize(Stage::Mq, "mq", rows, true)
}

// ---- long-term anticipation ----

/// Trains the clip classifier on training segments, scores it on held-out
/// segments and labels the held-out histories with it.
pub fn lta_classify(ctx: &Context) -> Result<()> {
    let dir = ctx.step_dir(Stage::Lta)?;
    let world = ctx.world()?;
    let enc = ctx.encoders()?;
    let sp = split(ctx, &world)?;
    let cfg = &ctx.config.lta.classifier;
    let (nv, nn) = (world.config.num_verbs, world.config.num_nouns);
    let train = LabeledClip::from_segments(&sp.segments(&world, false), &world.clips, cfg.frames_per_clip)?;
    let out = train_classifier(&enc, &train, nv, nn, cfg)?;
    out.model.save(&dir.join("classifier.ckpt"), out.state)?;
    let test = LabeledClip::from_segments(&sp.segments(&world, true), &world.clips, cfg.frames_per_clip)?;
    let report = crate::retrieval::evaluate_recognition(&out.model, &test)?.2;
    write_json(&dir.join("classification.json"), &report)?;
    let histories = classify_histories(&out.model, &sp.anticipation(&world, true), &world.clips)?;
    write_jsonl(&dir.join("histories.jsonl"), &histories)
}

/// Trains the forecaster on ground-truth training sequences and rolls out
/// candidates from the classified held-out histories.
pub fn lta_predict(ctx: &Context) -> Result<()> {
    let dir = ctx.step_dir(Stage::Lta)?;
    let world = ctx.world()?;
    let sp = split(ctx, &world)?;
    let cfg = &ctx.config.lta.forecaster;
    let train: Vec<AnticipationExample> =
        sp.anticipation(&world, false).iter().map(AnticipationExample::from).collect();
    let out = train_forecaster(&train, world.config.num_verbs, world.config.num_nouns, cfg)?;
    out.model.save(&dir.join("forecaster.ckpt"), out.state)?;
    let histories: Vec<AnticipationExample> = read_jsonl(&ctx.require_file(Stage::Lta, dir.join("histories.jsonl"))?)?;
    let candidates = predict_candidates(&out.model, &histories, cfg)?;
    write_jsonl(&dir.join("candidates.jsonl"), &candidates)
}

pub fn lta_eval(ctx: &Context) -> Result<Manifest> {
    let dir = ctx.step_dir(Stage::Lta)?;
    let report: ClassificationReport = read_json(&ctx.require_file(Stage::Lta, dir.join("classification.json"))?)?;
    let histories: Vec<AnticipationExample> = read_jsonl(&ctx.require_file(Stage::Lta, dir.join("histories.jsonl"))?)?;
    let candidates: Vec<CandidateRecord> = read_jsonl(&ctx.require_file(Stage::Lta, dir.join("candidates.jsonl"))?)?;
    // the checkpoint must at least parse before its rollouts are trusted
    ActionForecaster::load(&dir.join("forecaster.ckpt"))?;
    let mut cells = row([
        ("Verb Top1", pct(report.verb_top1)),
        ("Noun Top1", pct(report.noun_top1)),
        ("Action Top1", pct(report.action_top1)),
    ]);
    if histories.is_empty() {
        warn!("lta: no held-out anticipation examples; edit distance left blank");
    } else {
        let ed = eval_candidates(&candidates, &histories)?;
        cells.extend(row([("Verb ED", ed.verb), ("Noun ED", ed.noun), ("Action ED", ed.action)]));
    }
    ctx.finalize(Stage::Lta, "lta", MetricRows::from([("lta".to_string(), cells)]), false)
}

// ---- recognition, retrieval, adaptation ----

fn recognition_row(v: &Matrix, n: &Matrix, verbs: &[usize], nouns: &[usize]) -> Result<BTreeMap<String, f64>> {
    let r = classification_report(v, n, verbs, nouns)?;
    let top5 = |m: &Matrix, labels: &[usize]| topk_accuracy(m, labels, 5.min(m.cols()));
    Ok(row([
        ("Verb Top1", pct(r.verb_top1)),
        ("Noun Top1", pct(r.noun_top1)),
        ("Action Top1", pct(r.action_top1)),
        ("Verb Top5", pct(top5(v, verbs)?)),
        ("Noun Top5", pct(top5(n, nouns)?)),
    ]))
}

/// Independently seeded classifiers; with two or more their logits are
/// averaged for the written predictions.
pub fn ek_ar(ctx: &Context) -> Result<Manifest> {
    let dir = ctx.step_dir(Stage::EkAr)?;
    let world = ctx.world()?;
    let enc = ctx.encoders()?;
    let sp = split(ctx, &world)?;
    let track = &ctx.config.ek_ar;
    let (nv, nn) = (world.config.num_verbs, world.config.num_nouns);
    let frames = track.classifier.frames_per_clip;
    let train = LabeledClip::from_segments(&sp.segments(&world, false), &world.clips, frames)?;
    let test_segments = sp.segments(&world, true);
    let test = LabeledClip::from_segments(&test_segments, &world.clips, frames)?;
    let verbs: Vec<usize> = test.iter().map(|t| t.verb).collect();
    let nouns: Vec<usize> = test.iter().map(|t| t.noun).collect();
    let test_frames: Vec<_> = test.iter().map(|t| t.frames.clone()).collect();
    let mut rows = MetricRows::new();
    let (mut vs, mut ns) = (Vec::new(), Vec::new());
    for i in 0..track.members {
        let cfg =
            crate::encoders::ClassifierConfig { seed: track.classifier.seed + i as u64, ..track.classifier.clone() };
        let out = train_classifier(&enc, &train, nv, nn, &cfg)?;
        out.model.save(&dir.join(format!("classifier_{i}.ckpt")), out.state)?;
        let (v, n) = out.model.classify_clips(&test_frames)?;
        rows.insert(member_label(Stage::EkAr, i, track.members), recognition_row(&v, &n, &verbs, &nouns)?);
        vs.push(v);
        ns.push(n);
    }
    let (v, n) = if track.members > 1 {
        let v = average_logits(&LogitBundle::new(vs)?);
        let n = average_logits(&LogitBundle::new(ns)?);
        rows.insert("ek_ar ensemble".into(), recognition_row(&v, &n, &verbs, &nouns)?);
        (v, n)
    } else {
        (vs.remove(0), ns.remove(0))
    };
    let ids: Vec<String> = test_segments.iter().map(|s| s.item_id.clone()).collect();
    write_recognition_csv(&dir.join("predictions.csv"), &predictions_from_logits(&ids, &v, &n)?)?;
    ctx.finalize(Stage::EkAr, "ek_ar", rows, false)
}

fn retrieval_row(map: &DirectionalScores, ndcg: &DirectionalScores) -> BTreeMap<String, f64> {
    row([
        ("mAP V2T", pct(map.v2t)),
        ("mAP T2V", pct(map.t2v)),
        ("mAP Avg", pct(map.avg)),
        ("nDCG V2T", pct(ndcg.v2t)),
        ("nDCG T2V", pct(ndcg.t2v)),
        ("nDCG Avg", pct(ndcg.avg)),
    ])
}

/// Zero-shot retrieval with the stage-2 towers and, unless `zero_shot`,
/// after contrastive fine-tuning on training segments.
pub fn ek_mir(ctx: &Context, zero_shot: bool) -> Result<Manifest> {
    let dir = ctx.step_dir(Stage::EkMir)?;
    let world = ctx.world()?;
    let enc = ctx.encoders()?;
    let sp = split(ctx, &world)?;
    let track = &ctx.config.ek_mir;
    let test = RetrievalItem::from_segments(&sp.segments(&world, true), &world.clips, track.frames_per_item)?;
    let zs = evaluate_retrieval(&enc, &test)?;
    let mut rows = MetricRows::from([("ek_mir zero-shot".to_string(), retrieval_row(&zs.map, &zs.ndcg))]);
    let zero_shot = zero_shot || track.zero_shot;
    let final_enc = if zero_shot {
        enc
    } else {
        let train = RetrievalItem::from_segments(&sp.segments(&world, false), &world.clips, track.frames_per_item)?;
        let out = finetune_retrieval(&enc, &train, &track.finetune)?;
        out.checkpoint().save(&dir.join("finetuned.ckpt"))?;
        let ft = evaluate_retrieval(&out.encoders, &test)?;
        rows.insert("ek_mir fine-tuned".into(), retrieval_row(&ft.map, &ft.ndcg));
        out.encoders
    };
    let frames: Vec<_> = test.iter().map(|t| t.frames.clone()).collect();
    let captions: Vec<&str> = test.iter().map(|t| t.caption.as_str()).collect();
    write_embeddings(&dir.join("video_embeddings.egvf"), &final_enc.encode_videos(&frames)?)?;
    write_embeddings(&dir.join("text_embeddings.egvf"), &final_enc.encode_texts(&captions))?;
    let ids: Vec<&str> = test.iter().map(|t| t.id.as_str()).collect();
    write_bytes(&dir.join("item_ids.txt"), (ids.join("\n") + "\n").as_bytes())?;
    ctx.finalize(Stage::EkMir, "ek_mir", rows, true)
}

/// Source-only training on the reference world, evaluated on the shifted
/// target world; target labels stay sealed while training runs.
pub fn ek_uda(ctx: &Context) -> Result<Manifest> {
    let dir = ctx.step_dir(Stage::EkUda)?;
    let world = ctx.world()?;
    let target = load_world(&ctx.stage_dir(Stage::Corpus).join("target"))?;
    let enc = ctx.encoders()?;
    let cfg = &ctx.config.ek_uda.classifier;
    let (nv, nn) = (world.config.num_verbs, world.config.num_nouns);
    let split = DomainSplit::from_worlds(&world, &target, cfg.frames_per_clip)?;
    let out = domain_adapt_train(&split, &enc, nv, nn, cfg)?;
    out.model.save(&dir.join("classifier.ckpt"), out.state)?;
    let report = evaluate_target(&split, &out.model)?;
    let (v, n) = out.model.classify_clips(split.target_frames())?;
    write_recognition_csv(&dir.join("target_predictions.csv"), &predictions_from_logits(split.target_ids(), &v, &n)?)?;
    let cells = row([
        ("Verb Top1", pct(report.verb_top1)),
        ("Noun Top1", pct(report.noun_top1)),
        ("Action Top1", pct(report.action_top1)),
        ("Chance", pct(1.0 / (nv * nn) as f64)),
    ]);
    ctx.finalize(Stage::EkUda, "ek_uda", MetricRows::from([("ek_uda source-only".to_string(), cells)]), false)
}

// ---- ensembling ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionKind {
    /// Grounding records keyed by query.
    Grounding,
    /// Moment records keyed by (clip, category).
    Moments,
}

impl std::str::FromStr for PredictionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grounding" | "nlq" | "goalstep" => Ok(Self::Grounding),
            "moments" | "mq" => Ok(Self::Moments),
            _ => Err(Error::Config(format!("unknown prediction kind {s:?}"))),
        }
    }
}

/// Merges prediction files of one kind; `weights` default to uniform.
pub fn merge_prediction_files(
    kind: PredictionKind,
    inputs: &[PathBuf],
    weights: Option<&[f64]>,
    out: &Path,
) -> Result<usize> {
    if inputs.is_empty() {
        return Err(Error::Config("no prediction files to merge".into()));
    }
    let w = weights.map_or_else(|| uniform_weights(inputs.len()), <[f64]>::to_vec);
    match kind {
        PredictionKind::Grounding => {
            let lists = inputs.iter().map(|p| read_jsonl::<GroundingPrediction>(p)).collect::<Result<Vec<_>>>()?;
            let merged = merge_grounding_predictions(&lists, &w)?;
            write_jsonl(out, &merged)?;
            Ok(merged.len())
        }
        PredictionKind::Moments => {
            let lists = inputs.iter().map(|p| read_jsonl::<MomentPrediction>(p)).collect::<Result<Vec<_>>>()?;
            let merged = merge_moment_predictions(&lists, &w)?;
            write_jsonl(out, &merged)?;
            Ok(merged.len())
        }
    }
}

/// Merges the NLQ members' ranked predictions and scores the merge.
pub fn ensemble(ctx: &Context) -> Result<Manifest> {
    ctx.require(Stage::Ensemble)?;
    let nlq = ctx.stage_dir(Stage::Nlq);
    let inputs: Vec<PathBuf> = (0..ctx.config.nlq.members)
        .map(|i| ctx.require_file(Stage::Nlq, nlq.join(format!("predictions_{i}.jsonl"))))
        .collect::<Result<_>>()?;
    let gt: Vec<GroundingQuery> = read_jsonl(&ctx.require_file(Stage::Nlq, nlq.join("test_queries.jsonl"))?)?;
    let dir = ctx.fresh_dir(Stage::Ensemble)?;
    let out = dir.join("nlq_predictions.jsonl");
    merge_prediction_files(PredictionKind::Grounding, &inputs, ctx.config.ensemble.weights.as_deref(), &out)?;
    let merged: Vec<GroundingPrediction> = read_jsonl(&out)?;
    let rows = MetricRows::from([("nlq ensemble".to_string(), recall_row(&merged, &gt)?)]);
    ctx.finalize(Stage::Ensemble, "nlq", rows, false)
}

// ---- driver ----

/// Runs one complete stage from a clean directory.
pub fn run_stage(ctx: &Context, stage: Stage) -> Result<Manifest> {
    ctx.require(stage)?;
    info!("stage {stage}: starting");
    let manifest = match stage {
        Stage::Corpus => corpus(ctx)?,
        Stage::Pretrain => pretrain(ctx)?,
        Stage::Nlq | Stage::Goalstep => {
            ctx.fresh_dir(stage)?;
            grounding_train(ctx, stage)?;
            grounding_eval(ctx, stage)?
        }
        Stage::Mq => {
            ctx.fresh_dir(stage)?;
            mq_train(ctx)?;
            let m = mq_eval(ctx)?;
            if ctx.config.mq.members > 1 {
                mq_ensemble(ctx)?
            } else {
                m
            }
        }
        Stage::Lta => {
            ctx.fresh_dir(stage)?;
            lta_classify(ctx)?;
            lta_predict(ctx)?;
            lta_eval(ctx)?
        }
        Stage::EkAr => {
            ctx.fresh_dir(stage)?;
            ek_ar(ctx)?
        }
        Stage::EkMir => {
            ctx.fresh_dir(stage)?;
            ek_mir(ctx, false)?
        }
        Stage::EkUda => {
            ctx.fresh_dir(stage)?;
            ek_uda(ctx)?
        }
        Stage::Ensemble => ensemble(ctx)?,
        Stage::Report => {
            let dir = ctx.fresh_dir(stage)?;
            let report = render_report(&ctx.root)?;
            write_bytes(&dir.join("report.md"), report.markdown.as_bytes())?;
            ctx.finalize(stage, "report", MetricRows::new(), false)?
        }
    };
    info!("stage {stage}: done");
    Ok(manifest)
}

/// Runs the configured stages in order.
pub fn run_pipeline(ctx: &Context) -> Result<Vec<Manifest>> {
    ctx.config.stages.iter().map(|&s| run_stage(ctx, s)).collect()
}
