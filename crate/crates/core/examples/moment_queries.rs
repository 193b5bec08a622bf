//! Trains two moment detectors on the training videos of the reference
//! world, scores each on held-out clips, then averages their head outputs.

use std::collections::HashMap;

use egovideo::corpus::{generate_world, WorldConfig};
use egovideo::encoders::{EncoderConfig, Encoders};
use egovideo::features::{extract_tracks, SNIPPET_LEN, SNIPPET_STRIDE};
use egovideo::moments::{average_map, ensemble_detections, predict_moments, train_moments, MomentsConfig, MAP_TIOUS};
use egovideo::pipeline::VideoSplit;
use egovideo::train::PhaseConfig;

fn main() -> egovideo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let world = generate_world(&WorldConfig::reference())?;
    let split = VideoSplit::new(&world, 0.25)?;
    let enc = Encoders::new(EncoderConfig::default())?;
    let tracks = extract_tracks(&world.clips, &enc, SNIPPET_LEN, SNIPPET_STRIDE)?;
    let durations: HashMap<String, f64> = world.clips.iter().map(|c| (c.id.clone(), c.duration_s)).collect();
    let (train, test): (Vec<_>, Vec<_>) =
        world.annotations.moments.iter().cloned().partition(|a| split.train_clips.contains(&a.clip_id));
    let test_tracks: Vec<_> = tracks.iter().filter(|t| split.test_clips.contains(&t.clip_id)).cloned().collect();
    let classes = world.config.num_verbs;

    let mut members = Vec::new();
    for seed in [0, 1] {
        let cfg = MomentsConfig { phase: PhaseConfig::new(2, 12, 2, 2e-3), seed, ..MomentsConfig::default() };
        let model = train_moments(&train, &tracks, classes, &cfg)?.model;
        let preds = predict_moments(&model, &test_tracks, &durations)?;
        let r = average_map(&preds, &test, classes, &MAP_TIOUS)?;
        println!("member {seed}: avg mAP {:.3}, R1@0.5 {:.3}", r.average_map, r.r1_at_05);
        members.push(model);
    }

    let cfg = members[0].config().clone();
    let mut preds = Vec::new();
    for t in &test_tracks {
        let outputs =
            members.iter().map(|m| m.detect_moments(t, durations[&t.clip_id])).collect::<egovideo::Result<Vec<_>>>()?;
        preds.extend(ensemble_detections(&outputs)?.predictions(cfg.nms_sigma, cfg.score_floor, cfg.max_candidates)?);
    }
    let r = average_map(&preds, &test, classes, &MAP_TIOUS)?;
    for (t, v) in r.tious.iter().zip(&r.per_threshold) {
        println!("ensemble mAP@{t}: {v:.3}");
    }
    println!("ensemble: avg mAP {:.3}, R1@0.5 {:.3}", r.average_map, r.r1_at_05);
    Ok(())
}
