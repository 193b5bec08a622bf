//! Forecasts the next twenty actions from eight observed ones and shows how
//! the best-of-K edit distance falls as K grows.

use egovideo::anticipation::{
    eval_candidates, predict_candidates, train_forecaster, AnticipationExample, LTATrainConfig,
};
use egovideo::corpus::{generate_world, WorldConfig};
use egovideo::pipeline::VideoSplit;

fn main() -> egovideo::Result<()> {
    let world = generate_world(&WorldConfig::reference())?;
    let split = VideoSplit::new(&world, 0.25)?;
    let examples = |train: bool| -> Vec<AnticipationExample> {
        world
            .annotations
            .anticipation
            .iter()
            .filter(|a| split.train_videos.contains(&a.video_id) == train)
            .map(AnticipationExample::from)
            .collect()
    };
    let (train, test) = (examples(true), examples(false));
    println!("{} training and {} held-out sequences", train.len(), test.len());

    let cfg = LTATrainConfig::desk();
    let out = train_forecaster(&train, world.config.num_verbs, world.config.num_nouns, &cfg)?;
    if let (Some(first), Some(last)) = (out.state.epoch_losses.first(), out.state.epoch_losses.last()) {
        println!("loss {first:.3} -> {last:.3} over {} epochs", out.state.epoch_losses.len());
    }
    for k in [1, 3, 5] {
        let candidates = predict_candidates(&out.model, &test, &LTATrainConfig { k, ..cfg.clone() })?;
        let ed = eval_candidates(&candidates, &test)?;
        println!("K={k}: ED verb {:.3}, noun {:.3}, action {:.3}", ed.verb, ed.noun, ed.action);
    }
    Ok(())
}
