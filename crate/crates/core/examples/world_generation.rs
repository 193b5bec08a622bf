//! Generates the reference world, scores and selects narration pairs, and
//! writes the world to a scratch directory and reads it back.

use egovideo::corpus::{generate_world, load_world, save_world, select_corpus, SelectionConfig, WorldConfig};

fn main() -> egovideo::Result<()> {
    let world = generate_world(&WorldConfig::reference())?;
    let a = &world.annotations;
    println!(
        "{} clips, {} pairs; {} nlq, {} narration, {} step, {} moment, {} anticipation, {} segment annotations",
        world.clips.len(),
        world.pairs.len(),
        a.nlq.len(),
        a.naq.len(),
        a.goalstep.len(),
        a.moments.len(),
        a.anticipation.len(),
        a.segments.len()
    );
    for p in world.pairs.iter().take(5) {
        println!("  {} [{:.1}s, {:.1}s] {:?}", p.clip_id, p.start_s, p.end_s, p.caption);
    }

    let selected = select_corpus(&world.pairs, &SelectionConfig::default())?;
    println!("selected {} of {} pairs", selected.len(), world.pairs.len());

    let dir = std::env::temp_dir().join(format!("egovideo-world-{}", std::process::id()));
    save_world(&world, &dir)?;
    let back = load_world(&dir)?;
    println!("round trip through {}: identical = {}", dir.display(), back.clips == world.clips);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
