//! Trains the grounding head on snippet features of the reference world:
//! pretraining on narration queries, then fine-tuning on 50 NLQ queries.

use std::collections::HashSet;
use std::time::Instant;

use egovideo::corpus::{generate_world, WorldConfig};
use egovideo::encoders::{EncoderConfig, Encoders};
use egovideo::features::{extract_tracks, SNIPPET_LEN, SNIPPET_STRIDE};
use egovideo::grounding::{
    eval_grounding, predict_grounding, queries_from_annotations, train_grounding, GroundingConfig, RECALL_KS,
    RECALL_TIOUS,
};

fn main() -> egovideo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let world = generate_world(&WorldConfig::reference())?;
    let nlq = queries_from_annotations(&world.annotations.nlq);
    let (train, held) = nlq.split_at(50);
    let clips: HashSet<&str> = train.iter().map(|q| q.clip_id.as_str()).collect();
    let naq: Vec<_> = queries_from_annotations(&world.annotations.naq)
        .into_iter()
        .filter(|q| clips.contains(q.clip_id.as_str()))
        .collect();
    let held: Vec<_> = held.iter().take(50).cloned().collect();
    let used: HashSet<&str> = clips.iter().copied().chain(held.iter().map(|q| q.clip_id.as_str())).collect();
    let selected: Vec<_> = world.clips.iter().filter(|c| used.contains(c.id.as_str())).cloned().collect();

    let enc = Encoders::new(EncoderConfig::default())?;
    let t0 = Instant::now();
    let tracks = extract_tracks(&selected, &enc, SNIPPET_LEN, SNIPPET_STRIDE)?;
    println!("extracted {} tracks in {:.1}s", tracks.len(), t0.elapsed().as_secs_f64());

    let cfg = GroundingConfig::desk();
    let t0 = Instant::now();
    let out = train_grounding(Some(&naq), train, &tracks, &cfg)?;
    println!(
        "pretrained on {} and fine-tuned on {} queries in {:.1}s",
        naq.len(),
        train.len(),
        t0.elapsed().as_secs_f64()
    );
    for (name, set) in [("train", train), ("held-out", held.as_slice())] {
        let preds = predict_grounding(&out.model, set, &tracks)?;
        let table = eval_grounding(&preds, set, &RECALL_KS, &RECALL_TIOUS)?;
        let cells: Vec<String> = table.cells().iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
        println!("{name}: {}", cells.join("  "));
    }
    Ok(())
}
