//! On-disk layout of a generated world.
//!
//! ```text
//! <dir>/manifest.jsonl            one ClipTextPair per line
//! <dir>/clips.jsonl               clip metadata (id, video, fps, duration, script, path)
//! <dir>/clips/<clip_id>.egvc      raw frames
//! <dir>/annotations/<track>.jsonl per-track ground truth
//! <dir>/world.json                the generating config
//! ```
//!
//! `.egvc` files: magic `EGVC`, version `u32`, then `T, H, W, C` as `u32`
//! (all little-endian), followed by `T·H·W·C` raw bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotations::Annotations;
use super::world::{ActionScript, Clip, ClipTextPair, Frames, World, WorldConfig};
use crate::error::{Error, Result};
use crate::io::{put_u32, read_bytes, read_json, read_jsonl, to_u32, write_bytes, write_json, write_jsonl, LeReader};

pub const CLIP_MAGIC: &[u8; 4] = b"EGVC";
pub const CLIP_VERSION: u32 = 1;

pub fn encode_clip(frames: &Frames) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + frames.data.len());
    out.extend_from_slice(CLIP_MAGIC);
    put_u32(&mut out, CLIP_VERSION);
    for d in [frames.t, frames.h, frames.w, frames.c] {
        put_u32(&mut out, to_u32(d, "frame dimension")?);
    }
    out.extend_from_slice(&frames.data);
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<Frames> {
    let mut r = LeReader::new(bytes, path);
    r.magic(CLIP_MAGIC)?;
    let version = r.u32()?;
    if version != CLIP_VERSION {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("unsupported clip version {version}") });
    }
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let (t, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let data = r.take(t * h * w * c)?.to_vec();
    r.finish()?;
    Ok(Frames::new(t, h, w, c, data))
}

pub fn write_clip(path: &Path, frames: &Frames) -> Result<()> {
    write_bytes(path, &encode_clip(frames)?)
}

pub fn read_clip(path: &Path) -> Result<Frames> {
    decode_clip(&read_bytes(path)?, path)
}

#[derive(Serialize, Deserialize)]
struct ClipRecord {
    clip_id: String,
    video_id: String,
    path: String,
    fps: f64,
    duration_s: f64,
    script: ActionScript,
}

fn write_annotations(dir: &Path, a: &Annotations) -> Result<()> {
    write_jsonl(&dir.join("nlq.jsonl"), &a.nlq)?;
    write_jsonl(&dir.join("goalstep.jsonl"), &a.goalstep)?;
    write_jsonl(&dir.join("naq.jsonl"), &a.naq)?;
    write_jsonl(&dir.join("moments.jsonl"), &a.moments)?;
    write_jsonl(&dir.join("lta.jsonl"), &a.anticipation)?;
    write_jsonl(&dir.join("segments.jsonl"), &a.segments)
}

fn read_annotations(dir: &Path) -> Result<Annotations> {
    Ok(Annotations {
        nlq: read_jsonl(&dir.join("nlq.jsonl"))?,
        goalstep: read_jsonl(&dir.join("goalstep.jsonl"))?,
        naq: read_jsonl(&dir.join("naq.jsonl"))?,
        moments: read_jsonl(&dir.join("moments.jsonl"))?,
        anticipation: read_jsonl(&dir.join("lta.jsonl"))?,
        segments: read_jsonl(&dir.join("segments.jsonl"))?,
    })
}

pub fn write_manifest(path: &Path, pairs: &[ClipTextPair]) -> Result<()> {
    write_jsonl(path, pairs)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipTextPair>> {
    read_jsonl(path)
}

pub fn save_world(world: &World, dir: &Path) -> Result<()> {
    write_json(&dir.join("world.json"), &world.config)?;
    write_manifest(&dir.join("manifest.jsonl"), &world.pairs)?;
    let mut records = Vec::with_capacity(world.clips.len());
    for clip in &world.clips {
        let rel = format!("clips/{}.egvc", clip.id);
        write_clip(&dir.join(&rel), &clip.frames)?;
        records.push(ClipRecord {
            clip_id: clip.id.clone(),
            video_id: clip.video_id.clone(),
            path: rel,
            fps: clip.fps,
            duration_s: clip.duration_s,
            script: clip.script.clone(),
        });
    }
    write_jsonl(&dir.join("clips.jsonl"), &records)?;
    write_annotations(&dir.join("annotations"), &world.annotations)
}

pub fn load_world(dir: &Path) -> Result<World> {
    let config: WorldConfig = read_json(&dir.join("world.json"))?;
    let pairs = read_manifest(&dir.join("manifest.jsonl"))?;
    let records: Vec<ClipRecord> = read_jsonl(&dir.join("clips.jsonl"))?;
    let clips = records
        .into_iter()
        .map(|r| {
            Ok(Clip {
                frames: read_clip(&dir.join(&r.path))?,
                id: r.clip_id,
                video_id: r.video_id,
                fps: r.fps,
                duration_s: r.duration_s,
                script: r.script,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let annotations = read_annotations(&dir.join("annotations"))?;
    Ok(World { config, clips, pairs, annotations })
}
