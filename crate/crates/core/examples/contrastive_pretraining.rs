//! Post-pretrains the two towers on the 256-pair world and reports zero-shot
//! text-to-video recall on a held-out world.

use std::time::Instant;

use egovideo::corpus::{generate_world, select_corpus, SelectionConfig, WorldConfig};
use egovideo::encoders::{post_pretrain, EncoderConfig, Encoders, PretrainConfig, TrainingPair};

fn main() -> egovideo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let world = generate_world(&WorldConfig::pair_reference())?;
    let corpus = select_corpus(&world.pairs, &SelectionConfig::default())?;
    let cfg = PretrainConfig::default();
    let pairs = TrainingPair::from_corpus(&corpus, &world.clips, cfg.frames_per_pair)?;

    let held = generate_world(&WorldConfig { seed: 1, num_clips: 64, ..WorldConfig::pair_reference() })?;
    let eval = TrainingPair::from_corpus(&held.pairs[..64], &held.clips, cfg.frames_per_pair)?;

    let init = Encoders::new(EncoderConfig::default())?;
    let t0 = Instant::now();
    let out = post_pretrain(&init, &pairs, &cfg)?;
    println!("trained {} pairs in {:.1}s", pairs.len(), t0.elapsed().as_secs_f64());
    println!("epoch losses: {:?}", out.state.epoch_losses);

    for (name, enc) in [("init", &init), ("stage2", &out.encoders)] {
        let videos: Vec<_> = eval.iter().map(|p| p.frames.clone()).collect();
        let captions: Vec<&str> = eval.iter().map(|p| p.caption.as_str()).collect();
        let v = enc.encode_videos(&videos)?;
        let t = enc.encode_texts(&captions);
        let sim = t.matmul_t(&v);
        let hits = (0..sim.rows()).filter(|&q| egovideo::tensor::argmax(sim.row(q)) == q).count();
        println!("{name}: T2V R@1 = {:.3} (chance {:.3})", hits as f64 / 64.0, 1.0 / 64.0);
    }
    Ok(())
}
