//! Source-only recognition evaluated on a colour- and speed-shifted world.
//! Target labels are sealed while training runs; reading them then fails.

use egovideo::corpus::{generate_world, DomainShift, WorldConfig};
use egovideo::encoders::{ClassifierConfig, EncoderConfig, Encoders};
use egovideo::retrieval::{domain_adapt_train, evaluate_target, DomainSplit};
use egovideo::train::PhaseConfig;

fn main() -> egovideo::Result<()> {
    let source = generate_world(&WorldConfig::reference())?;
    let target = generate_world(&WorldConfig {
        seed: 99,
        num_clips: 64,
        shift: DomainShift { hue_degrees: 40.0, speed: 1.5 },
        ..WorldConfig::reference()
    })?;
    let cfg = ClassifierConfig { phase: PhaseConfig::new(16, 8, 1, 5e-3), ..ClassifierConfig::default() };
    let split = DomainSplit::from_worlds(&source, &target, cfg.frames_per_clip)?;
    println!("{} source items, {} target items", split.source().len(), split.target_ids().len());

    {
        let _seal = split.seal();
        println!("label read while sealed: {:?}", split.target_labels().read().map(|_| ()));
    }

    let enc = Encoders::new(EncoderConfig::default())?;
    let (nv, nn) = (source.config.num_verbs, source.config.num_nouns);
    let out = domain_adapt_train(&split, &enc, nv, nn, &cfg)?;
    let r = evaluate_target(&split, &out.model)?;
    println!(
        "target top-1: verb {:.3}, noun {:.3}, action {:.3} (chance {:.4})",
        r.verb_top1,
        r.noun_top1,
        r.action_top1,
        1.0 / (nv * nn) as f64
    );
    Ok(())
}
