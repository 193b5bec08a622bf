//! Frame synthesis: every (verb, noun) renders as a colored blob whose color
//! is keyed to the noun and whose trajectory is keyed to the verb.

use rand::Rng;

use super::world::{ActionScript, Frames, WorldConfig};
use crate::rng::stream;

const BACKGROUND: f64 = 60.0;
const NOISE: i32 = 12;

pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

pub fn noun_color(noun: usize, num_nouns: usize, hue_shift: f64) -> [f64; 3] {
    hsv_to_rgb(360.0 * noun as f64 / num_nouns as f64 + hue_shift, 0.9, 0.95)
}

fn triangle(u: f64) -> f64 {
    1.0 - (1.0 - 2.0 * u.rem_euclid(1.0)).abs()
}

/// Normalized top-left blob position in `[0, 1]²` for `verb` at `t` seconds
/// into the action.
pub fn verb_position(verb: usize, t: f64) -> (f64, f64) {
    let u = 0.5 * t;
    let tri = triangle(u);
    let lane = verb / 4;
    let lane_pos = [0.1, 0.9, 0.5][lane % 3];
    match verb % 4 {
        0 => (tri, lane_pos),
        1 => (lane_pos, tri),
        2 => match lane % 3 {
            0 => (tri, tri),
            1 => (tri, 1.0 - tri),
            _ => (tri, 0.5 + 0.4 * (std::f64::consts::TAU * u).sin()),
        },
        _ => {
            let (cx, cy) = [(0.5, 0.5), (0.25, 0.75), (0.75, 0.25)][lane % 3];
            let a = std::f64::consts::TAU * u;
            ((cx + 0.25 * a.cos()).clamp(0.0, 1.0), (cy + 0.25 * a.sin()).clamp(0.0, 1.0))
        }
    }
}

/// Renders `num_frames` frames for `script`.
pub fn render_clip(
    cfg: &WorldConfig,
    script: &ActionScript,
    num_frames: usize,
    (h, w, c): (usize, usize, usize),
    clip_index: u64,
) -> Frames {
    let mut rng = stream(cfg.seed, "frames", clip_index);
    let mut data = vec![0u8; num_frames * h * w * c];
    let blob = (h.min(w) / 4).max(2);
    let frame_len = h * w * c;
    for f in 0..num_frames {
        let frame = &mut data[f * frame_len..(f + 1) * frame_len];
        for px in frame.iter_mut() {
            *px = (BACKGROUND + f64::from(rng.random_range(-NOISE..=NOISE))) as u8;
        }
        let t = (f as f64 + 0.5) / cfg.fps;
        let Some(entry) = script.entries.iter().find(|e| t >= e.start_s && t < e.end_s) else {
            continue;
        };
        let color = noun_color(entry.noun_id, cfg.num_nouns, cfg.shift.hue_degrees);
        let (px, py) = verb_position(entry.verb_id, (t - entry.start_s) * cfg.shift.speed);
        let x0 = (px * (w - blob) as f64).round() as usize;
        let y0 = (py * (h - blob) as f64).round() as usize;
        for y in y0..y0 + blob {
            for x in x0..x0 + blob {
                for ch in 0..c {
                    frame[(y * w + x) * c + ch] = color[ch % 3].round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Frames::new(num_frames, h, w, c, data)
}
