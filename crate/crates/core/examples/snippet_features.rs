//! Snippet features for a few clips: extraction, the binary feature file,
//! projection and channel fusion.

use egovideo::corpus::{generate_world, WorldConfig};
use egovideo::encoders::{EncoderConfig, Encoders};
use egovideo::features::{
    concat_fuse, extract_tracks, load_tracks, project_features, save_tracks, SNIPPET_LEN, SNIPPET_STRIDE,
};
use egovideo::Matrix;

fn main() -> egovideo::Result<()> {
    let world = generate_world(&WorldConfig { num_clips: 4, ..WorldConfig::reference() })?;
    let enc = Encoders::new(EncoderConfig::default())?;
    let tracks = extract_tracks(&world.clips, &enc, SNIPPET_LEN, SNIPPET_STRIDE)?;
    for t in &tracks {
        println!("{}: {} snippets × {} dims, stride {:.2}s", t.clip_id, t.len(), t.dim(), t.stride_s());
    }

    let dir = std::env::temp_dir().join(format!("egovideo-features-{}", std::process::id()));
    let entries = save_tracks(&dir, &tracks)?;
    let back = load_tracks(&dir.join("manifest.jsonl"))?;
    // values are stored as f32
    let max_err = tracks
        .iter()
        .zip(&back)
        .flat_map(|(a, b)| a.features.as_slice().iter().zip(b.features.as_slice()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    println!("wrote {} feature files; largest reload deviation {max_err:.2e}", entries.len());
    let _ = std::fs::remove_dir_all(&dir);

    // a fixed pseudo-random projection to 8 dims, then concatenated with the original
    let d = tracks[0].dim();
    let w = Matrix::from_vec(d, 8, (0..d * 8).map(|i| ((i * 31 % 13) as f64 - 6.0) / 13.0).collect());
    let projected = project_features(&tracks[0], &w)?;
    let fused = concat_fuse(&[tracks[0].clone(), projected])?;
    println!("fused track: {} × {}", fused.len(), fused.dim());
    Ok(())
}
