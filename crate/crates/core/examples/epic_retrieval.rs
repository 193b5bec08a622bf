//! Multi-instance text-video retrieval on held-out segments: the untrained
//! towers, then after contrastive fine-tuning on the training segments.

use egovideo::corpus::{generate_world, WorldConfig};
use egovideo::encoders::{EncoderConfig, Encoders};
use egovideo::pipeline::VideoSplit;
use egovideo::retrieval::{evaluate_retrieval, finetune_retrieval, retrieval_finetune_desk, RetrievalItem};

fn main() -> egovideo::Result<()> {
    let world = generate_world(&WorldConfig::reference())?;
    let split = VideoSplit::new(&world, 0.25)?;
    let (train, test): (Vec<_>, Vec<_>) =
        world.annotations.segments.iter().cloned().partition(|s| split.train_clips.contains(&s.clip_id));
    let train = RetrievalItem::from_segments(&train, &world.clips, 8)?;
    let test = RetrievalItem::from_segments(&test, &world.clips, 8)?;
    println!("{} training and {} gallery items", train.len(), test.len());

    let enc = Encoders::new(EncoderConfig::default())?;
    let zs = evaluate_retrieval(&enc, &test)?;
    let out = finetune_retrieval(&enc, &train, &retrieval_finetune_desk())?;
    let ft = evaluate_retrieval(&out.encoders, &test)?;
    for (name, r) in [("zero-shot", &zs), ("fine-tuned", &ft)] {
        println!(
            "{name:>10}: mAP v2t {:.3} t2v {:.3} avg {:.3} | nDCG v2t {:.3} t2v {:.3} avg {:.3}",
            r.map.v2t, r.map.t2v, r.map.avg, r.ndcg.v2t, r.ndcg.t2v, r.ndcg.avg
        );
    }
    Ok(())
}
