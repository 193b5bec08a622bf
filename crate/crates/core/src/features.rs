//! Snippet feature tracks and the three fusion mechanisms: projection,
//! concatenation and temporal pyramid interpolation.
//!
//! Feature files (`.egvf`): magic `EGVF`, then `N, D, s, δ` as `u32` and
//! `fps` as `f32` (little-endian), followed by `N·D` row-major `f32`. Embedding
//! dumps reuse the layout with `s = δ = 0` and `fps = 0`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Clip, Frames};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::io::{put_f32, put_u32, read_bytes, read_jsonl, to_u32, write_bytes, write_jsonl, LeReader};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"EGVF";
pub const SNIPPET_LEN: usize = 16;
pub const SNIPPET_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnippetFeatureTrack {
    pub clip_id: String,
    pub features: Matrix,
    pub snippet_len: usize,
    pub stride: usize,
    pub fps: f64,
}

impl SnippetFeatureTrack {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Center of snippet `i` in seconds.
    pub fn center_s(&self, i: usize) -> f64 {
        (i * self.stride) as f64 / self.fps + self.snippet_len as f64 / (2.0 * self.fps)
    }

    /// Seconds between consecutive snippets.
    pub fn stride_s(&self) -> f64 {
        self.stride as f64 / self.fps
    }

    fn same_geometry(&self, other: &SnippetFeatureTrack) -> bool {
        self.len() == other.len()
            && self.snippet_len == other.snippet_len
            && self.stride == other.stride
            && self.fps == other.fps
            && self.clip_id == other.clip_id
    }
}

/// `floor((T − s)/δ) + 1` for `T ≥ s`, otherwise 1 (the padded snippet).
pub fn snippet_count(num_frames: usize, snippet_len: usize, stride: usize) -> usize {
    if num_frames < snippet_len {
        1
    } else {
        (num_frames - snippet_len) / stride + 1
    }
}

/// Frames of snippet `i`; clips shorter than `s` are right-padded by
/// repeating the last frame.
pub fn snippet_frames(frames: &Frames, i: usize, snippet_len: usize, stride: usize) -> Frames {
    let start = i * stride;
    let idx: Vec<usize> = (start..start + snippet_len).map(|f| f.min(frames.t - 1)).collect();
    frames.gather(&idx)
}

/// Row `i` encodes frames `[i·δ, i·δ + s)`; uncovered tail frames are dropped.
pub fn extract_snippet_track(
    clip: &Clip,
    enc: &Encoders,
    snippet_len: usize,
    stride: usize,
) -> Result<SnippetFeatureTrack> {
    if snippet_len == 0 || stride == 0 {
        return Err(Error::Config("snippet length and stride must be positive".into()));
    }
    if clip.frames.t == 0 {
        return Err(Error::Empty(format!("clip {} has no frames", clip.id)));
    }
    let n = snippet_count(clip.frames.t, snippet_len, stride);
    let rows = (0..n)
        .into_par_iter()
        .map(|i| enc.encode_video(&snippet_frames(&clip.frames, i, snippet_len, stride)).map(|e| e.values))
        .collect::<Result<Vec<_>>>()?;
    let dim = enc.config().embed_dim;
    Ok(SnippetFeatureTrack {
        clip_id: clip.id.clone(),
        features: Matrix::from_vec(n, dim, rows.into_iter().flatten().collect()),
        snippet_len,
        stride,
        fps: clip.fps,
    })
}

/// Tracks for many clips, in input order.
pub fn extract_tracks(
    clips: &[Clip],
    enc: &Encoders,
    snippet_len: usize,
    stride: usize,
) -> Result<Vec<SnippetFeatureTrack>> {
    clips.iter().map(|c| extract_snippet_track(c, enc, snippet_len, stride)).collect()
}

/// Applies `weights` (`D × out_dim`) to every row.
pub fn project_features(track: &SnippetFeatureTrack, weights: &Matrix) -> Result<SnippetFeatureTrack> {
    if weights.rows() != track.dim() {
        return Err(Error::Shape(format!(
            "projection expects {} input rows, track has width {}",
            weights.rows(),
            track.dim()
        )));
    }
    Ok(SnippetFeatureTrack { features: track.features.matmul(weights), ..track.clone() })
}

/// Row-wise concatenation of tracks sharing clip and temporal geometry.
pub fn concat_fuse(tracks: &[SnippetFeatureTrack]) -> Result<SnippetFeatureTrack> {
    let first = tracks.first().ok_or_else(|| Error::Empty("concat_fuse needs at least one track".into()))?;
    if let Some(bad) = tracks.iter().find(|t| !first.same_geometry(t)) {
        return Err(Error::Shape(format!(
            "track of {} ({} rows) does not align with {} ({} rows)",
            bad.clip_id,
            bad.len(),
            first.clip_id,
            first.len()
        )));
    }
    let mats: Vec<&Matrix> = tracks.iter().map(|t| &t.features).collect();
    Ok(SnippetFeatureTrack { features: Matrix::concat_cols(&mats), ..first.clone() })
}

/// Linear resampling along rows to `len` positions, sampling source
/// coordinate `(i + ½)·N/len − ½` clamped to `[0, N−1]`.
pub fn interpolate_rows(m: &Matrix, len: usize) -> Result<Matrix> {
    if m.rows() == 0 || len == 0 {
        return Err(Error::Shape("interpolation needs nonempty source and target".into()));
    }
    let n = m.rows();
    let mut out = Matrix::zeros(len, m.cols());
    for i in 0..len {
        let src = ((i as f64 + 0.5) * n as f64 / len as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let w = src - lo as f64;
        let (a, b) = (m.row(lo), m.row(hi));
        for (o, (x, y)) in out.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
            *o = if w == 0.0 { *x } else { (1.0 - w) * x + w * y };
        }
    }
    Ok(out)
}

/// Interpolates `last_map` to every pyramid length and adds it to the
/// matching still-feature level.
pub fn pyramid_fuse(last_map: &Matrix, target_lengths: &[usize], still_pyramid: &[Matrix]) -> Result<Vec<Matrix>> {
    if target_lengths.len() != still_pyramid.len() {
        return Err(Error::Shape(format!(
            "{} target lengths for {} pyramid levels",
            target_lengths.len(),
            still_pyramid.len()
        )));
    }
    target_lengths
        .iter()
        .zip(still_pyramid)
        .map(|(&len, still)| {
            if still.rows() != len || still.cols() != last_map.cols() {
                return Err(Error::Shape(format!(
                    "still level is {:?}, expected {len}x{}",
                    still.shape(),
                    last_map.cols()
                )));
            }
            let mut up = interpolate_rows(last_map, len)?;
            up.add_assign(still);
            Ok(up)
        })
        .collect()
}

pub fn encode_feature_file(features: &Matrix, snippet_len: usize, stride: usize, fps: f64) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, to_u32(features.rows(), "N")?);
    put_u32(&mut out, to_u32(features.cols(), "D")?);
    put_u32(&mut out, to_u32(snippet_len, "snippet length")?);
    put_u32(&mut out, to_u32(stride, "stride")?);
    put_f32(&mut out, fps as f32);
    for &x in features.as_slice() {
        put_f32(&mut out, x as f32);
    }
    Ok(out)
}

/// Returns `(features, s, δ, fps)`.
pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<(Matrix, usize, usize, f64)> {
    let mut r = LeReader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let s = r.u32()? as usize;
    let stride = r.u32()? as usize;
    let fps = f64::from(r.f32()?);
    let data = (0..n * d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((Matrix::from_vec(n, d, data), s, stride, fps))
}

pub fn write_track(path: &Path, track: &SnippetFeatureTrack) -> Result<()> {
    write_bytes(path, &encode_feature_file(&track.features, track.snippet_len, track.stride, track.fps)?)
}

pub fn read_track(path: &Path, clip_id: &str) -> Result<SnippetFeatureTrack> {
    let (features, snippet_len, stride, fps) = decode_feature_file(&read_bytes(path)?, path)?;
    Ok(SnippetFeatureTrack { clip_id: clip_id.to_string(), features, snippet_len, stride, fps })
}

pub fn write_embeddings(path: &Path, embeddings: &Matrix) -> Result<()> {
    write_bytes(path, &encode_feature_file(embeddings, 0, 0, 0.0)?)
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    Ok(decode_feature_file(&read_bytes(path)?, path)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifestEntry {
    pub clip_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
}

/// Writes `<dir>/<clip_id>.egvf` per track and `<dir>/manifest.jsonl`.
pub fn save_tracks(dir: &Path, tracks: &[SnippetFeatureTrack]) -> Result<Vec<FeatureManifestEntry>> {
    let entries: Vec<FeatureManifestEntry> = tracks
        .iter()
        .map(|t| FeatureManifestEntry { clip_id: t.clip_id.clone(), path: format!("{}.egvf", t.clip_id) })
        .collect();
    for (t, e) in tracks.iter().zip(&entries) {
        write_track(&dir.join(&e.path), t)?;
    }
    write_jsonl(&dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

pub fn load_tracks(manifest: &Path) -> Result<Vec<SnippetFeatureTrack>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<FeatureManifestEntry> = read_jsonl(manifest)?;
    entries.iter().map(|e| read_track(&base.join(&e.path), &e.clip_id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ActionScript, Clip};
    use crate::encoders::EncoderConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(t: usize) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        Clip {
            id: format!("c{t}"),
            video_id: "v".into(),
            frames: Frames::new(t, 16, 16, 3, (0..t * 768).map(|_| rng.random::<u8>()).collect()),
            fps: 8.0,
            duration_s: t as f64 / 8.0,
            script: ActionScript::default(),
        }
    }

    fn track(rows: usize, cols: usize, seed: u64) -> SnippetFeatureTrack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SnippetFeatureTrack {
            clip_id: "c".into(),
            features: Matrix::randn(rows, cols, 1.0, &mut rng),
            snippet_len: 16,
            stride: 16,
            fps: 8.0,
        }
    }

    #[test]
    fn snippet_counts() {
        assert_eq!(snippet_count(16, 16, 16), 1);
        assert_eq!(snippet_count(48, 16, 16), 3);
        assert_eq!(snippet_count(5, 16, 16), 1);
        assert_eq!(snippet_count(47, 16, 16), 2);
    }

    #[test]
    fn row_equals_direct_slice_encoding() {
        let enc = Encoders::new(EncoderConfig::default()).unwrap();
        let c = clip(48);
        let t = extract_snippet_track(&c, &enc, 16, 16).unwrap();
        assert_eq!(t.len(), 3);
        let direct = enc.encode_video(&c.frames.slice(16, 32)).unwrap();
        assert_eq!(t.features.row(1), direct.values.as_slice());
        assert!(extract_snippet_track(&c, &enc, 0, 16).is_err());
        assert!(extract_snippet_track(&c, &enc, 16, 0).is_err());
    }

    #[test]
    fn short_clip_is_padded_with_last_frame() {
        let enc = Encoders::new(EncoderConfig::default()).unwrap();
        let c = clip(5);
        let t = extract_snippet_track(&c, &enc, 16, 16).unwrap();
        assert_eq!(t.len(), 1);
        let mut idx: Vec<usize> = (0..5).collect();
        idx.extend([4; 11]);
        assert_eq!(t.features.row(0), enc.encode_video(&c.frames.gather(&idx)).unwrap().values.as_slice());
    }

    #[test]
    fn projection_cases() {
        let t = track(3, 8, 1);
        assert_eq!(project_features(&t, &Matrix::identity(8)).unwrap(), t);
        let zero = project_features(&t, &Matrix::zeros(8, 4)).unwrap();
        assert!(zero.features.as_slice().iter().all(|&x| x == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::randn(8, 4, 1.0, &mut rng);
        let out = project_features(&t, &w).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += t.features[(r, k)] * w[(k, c)];
                }
                assert!((out.features[(r, c)] - acc).abs() < 1e-12);
            }
        }
        assert!(project_features(&t, &Matrix::zeros(7, 4)).is_err());
    }

    #[test]
    fn concat_index_bookkeeping() {
        let a = track(3, 4, 1);
        let b = track(3, 6, 2);
        assert_eq!(concat_fuse(std::slice::from_ref(&a)).unwrap(), a);
        let ab = concat_fuse(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.dim(), 10);
        for r in 0..3 {
            for c in 0..10 {
                let want = if c < 4 { a.features[(r, c)] } else { b.features[(r, c - 4)] };
                assert_eq!(ab.features[(r, c)], want);
            }
        }
        let aa = concat_fuse(&[a.clone(), a.clone()]).unwrap();
        for r in 0..3 {
            assert_eq!(&aa.features.row(r)[..4], &aa.features.row(r)[4..]);
        }
        let short = track(2, 4, 3);
        assert!(concat_fuse(&[a.clone(), short]).is_err());
        let mut other = b.clone();
        other.stride = 8;
        assert!(concat_fuse(&[a, other]).is_err());
        assert!(concat_fuse(&[]).is_err());
    }

    #[test]
    fn interpolation_matches_piecewise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::randn(4, 3, 1.0, &mut rng);
        let out = interpolate_rows(&m, 7).unwrap();
        for i in 0..7 {
            let x = ((i as f64 + 0.5) * 4.0 / 7.0 - 0.5).max(0.0).min(3.0);
            for c in 0..3 {
                // evaluate the piecewise-linear curve through (k, m[k]) at x
                let k = (x as usize).min(2);
                let want = m[(k, c)] + (x - k as f64) * (m[(k + 1, c)] - m[(k, c)]);
                assert!((out[(i, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_fuse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let last = Matrix::randn(4, 3, 1.0, &mut rng);
        let still = Matrix::randn(4, 3, 1.0, &mut rng);
        let fused = pyramid_fuse(&last, &[4], std::slice::from_ref(&still)).unwrap();
        assert!(fused[0].max_abs_diff(&last.zip_map(&still, |a, b| a + b)) == 0.0);
        let zeros = vec![Matrix::zeros(7, 3), Matrix::zeros(2, 3)];
        let fused = pyramid_fuse(&last, &[7, 2], &zeros).unwrap();
        assert_eq!(fused[0], interpolate_rows(&last, 7).unwrap());
        assert_eq!(fused[1], interpolate_rows(&last, 2).unwrap());
        assert!(pyramid_fuse(&last, &[7], &zeros).is_err());
        assert!(pyramid_fuse(&last, &[7, 3], &zeros).is_err());
        assert!(pyramid_fuse(&last, &[4], &[Matrix::zeros(4, 2)]).is_err());
    }

    #[test]
    fn feature_file_layout_and_roundtrip() {
        let t = track(3, 5, 9);
        let bytes = encode_feature_file(&t.features, 16, 16, 8.0).unwrap();
        assert_eq!(&bytes[..4], b"EGVF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 8.0);
        assert_eq!(bytes.len(), 24 + 4 * 15);
        let dir = tempfile::tempdir().unwrap();
        let entries = save_tracks(dir.path(), std::slice::from_ref(&t)).unwrap();
        assert_eq!(entries[0].path, "c.egvf");
        let back = load_tracks(&dir.path().join("manifest.jsonl")).unwrap().remove(0);
        assert_eq!((back.snippet_len, back.stride, back.fps, &back.clip_id), (16, 16, 8.0, &t.clip_id));
        let rounded = t.features.map(|x| f64::from(x as f32));
        assert_eq!(back.features, rounded);
        assert!(decode_feature_file(&bytes[..30], Path::new("x")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn count_formula_holds(t in 1usize..80, s in 1usize..20, d in 1usize..20) {
            let frames = Frames::new(t, 4, 4, 1, vec![0; t * 16]);
            let n = snippet_count(t, s, d);
            let expected = if t >= s { (t - s) / d + 1 } else { 1 };
            prop_assert_eq!(n, expected);
            // every snippet stays inside the clip (after padding) and has s frames
            for i in 0..n {
                prop_assert_eq!(snippet_frames(&frames, i, s, d).t, s);
                prop_assert!(t < s || i * d + s <= t);
            }
        }

        #[test]
        fn concat_is_associative(seed in 0u64..1000) {
            let (a, b, c) = (track(3, 2, seed), track(3, 3, seed + 1), track(3, 1, seed + 2));
            let left = concat_fuse(&[concat_fuse(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
            prop_assert_eq!(left, concat_fuse(&[a, b, c]).unwrap());
        }

        #[test]
        fn identity_pyramid_fuse(seed in 0u64..1000, n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let last = Matrix::randn(n, 3, 1.0, &mut rng);
            let out = pyramid_fuse(&last, &[n], &[Matrix::zeros(n, 3)]).unwrap();
            prop_assert_eq!(&out[0], &last);
        }
    }
}
