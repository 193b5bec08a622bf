//! Every stage on the desk profile, written under a scratch directory, with
//! the rendered report printed at the end.
//!
//! Takes about a minute with `--release`.

use egovideo::pipeline::{run_pipeline, Context, RunConfig};

fn main() -> egovideo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("egovideo-full-pipeline"));
    let ctx = Context::new(RunConfig::desk(), &root);
    for m in run_pipeline(&ctx)? {
        println!("{:<9} {:>3} artifacts  config {}", m.stage, m.artifacts.len(), &m.config_hash[..12]);
    }
    print!(
        "{}",
        std::fs::read_to_string(root.join("report").join("report.md")).map_err(|e| egovideo::Error::io(&root, e))?
    );
    Ok(())
}
