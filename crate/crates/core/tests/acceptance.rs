//! End-to-end acceptance checks. Runs without the test harness so every
//! criterion prints its own PASS/FAIL line; exits nonzero if any fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use egovideo::anticipation::{
    edit_distance_eval, eval_candidates, predict_candidates, train_forecaster, AnticipationExample, LTATrainConfig,
};
use egovideo::checkpoint::Checkpoint;
use egovideo::corpus::{
    generate_world, load_world, ActionToken, DomainShift, MomentAnnotation, SequenceModel, WorldConfig, FUTURE_LEN,
};
use egovideo::encoders::{
    contrastive_loss, post_pretrain, ClassifierConfig, EncoderConfig, Encoders, LabeledClip, PretrainConfig,
    TrainingPair,
};
use egovideo::ensemble::{average_logits, LogitBundle};
use egovideo::features::{extract_tracks, SnippetFeatureTrack, SNIPPET_LEN, SNIPPET_STRIDE};
use egovideo::grounding::{
    eval_grounding, predict_grounding, queries_from_annotations, train_grounding, GroundingConfig, GroundingPrediction,
    GroundingQuery,
};
use egovideo::metrics::{levenshtein, tiou, topk_accuracy};
use egovideo::moments::{average_map, ensemble_detections, train_moments, MomentPrediction, MomentsConfig, MAP_TIOUS};
use egovideo::pipeline::{run_pipeline, Context, RunConfig, Stage, VideoSplit, MANIFEST_FILE};
use egovideo::retrieval::{
    domain_adapt_train, evaluate_retrieval, evaluate_target, paired_recall_at_k, retrieval_map, retrieval_ndcg,
    similarity_matrix, DomainItem, DomainSplit, RelevanceMatrix, RetrievalItem,
};
use egovideo::train::PhaseConfig;
use egovideo::{Matrix, TemporalSegment};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- independent oracles ----

/// Segments on a quarter-second grid, measured by counting covered cells.
fn cells(s: &TemporalSegment) -> (i64, i64) {
    ((s.start_s * 4.0).round() as i64, (s.end_s * 4.0).round() as i64)
}

fn oracle_tiou(a: &TemporalSegment, b: &TemporalSegment) -> f64 {
    let ((a0, a1), (b0, b1)) = (cells(a), cells(b));
    if (a0, a1) == (b0, b1) {
        return 1.0;
    }
    let inter = (a0..a1).filter(|k| (b0..b1).contains(k)).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let union = (a1 - a0) as f64 + (b1 - b0) as f64 - inter;
    inter * 0.25 / (union * 0.25 + 1e-9)
}

fn oracle_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = oracle_levenshtein(ra, rb) + usize::from(x != y);
            sub.min(oracle_levenshtein(ra, b) + 1).min(oracle_levenshtein(a, rb) + 1)
        }
    }
}

/// Memoised top-down form, for sequences too long for plain recursion.
fn memo_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = (go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]))
            .min(go(a, b, i + 1, j, memo) + 1)
            .min(go(a, b, i, j + 1, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Indices of `scores` from best to worst; equal scores keep their order.
fn oracle_order(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for (p, &i) in left.iter().enumerate() {
            if scores[i] > scores[left[best]] {
                best = p;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn grid_segment(rng: &mut ChaCha8Rng, max_start: i64, max_len: i64, min_len: i64) -> (f64, f64) {
    let a = rng.random_range(0..=max_start);
    let l = rng.random_range(min_len..=max_len);
    (a as f64 / 4.0, (a + l) as f64 / 4.0)
}

fn scored(rng: &mut ChaCha8Rng) -> TemporalSegment {
    let (a, b) = grid_segment(rng, 60, 30, 0);
    TemporalSegment::scored(a, b, rng.random_range(0..6) as f64 / 5.0)
}

fn oracle_recall(preds: &[GroundingPrediction], gt: &[GroundingQuery], k: usize, t: f64) -> f64 {
    let hits = gt
        .iter()
        .filter(|q| {
            let Some(p) = preds.iter().find(|p| p.query_id == q.query_id) else { return false };
            let scores: Vec<f64> = p.segments.iter().map(|s| s.score.unwrap()).collect();
            oracle_order(&scores).into_iter().take(k).any(|i| oracle_tiou(&p.segments[i], &q.gt.unwrap()) >= t)
        })
        .count();
    hits as f64 / gt.len() as f64
}

/// Greedy matching of ranked `(clip, segment)` detections: each takes the
/// unused ground truth of its clip with the largest tIoU ≥ `t`, first on ties.
fn oracle_matches(
    ranked: &[(String, TemporalSegment)],
    gts: &BTreeMap<String, Vec<TemporalSegment>>,
    t: f64,
) -> Vec<bool> {
    let mut used: HashSet<(String, usize)> = HashSet::new();
    ranked
        .iter()
        .map(|(clip, s)| {
            let Some(list) = gts.get(clip) else { return false };
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in list.iter().enumerate() {
                let o = oracle_tiou(s, g);
                if !used.contains(&(clip.clone(), j)) && o >= t && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            best.map(|(j, _)| used.insert((clip.clone(), j))).is_some()
        })
        .collect()
}

/// Precision envelope at every true positive, averaged over all ground truth.
fn oracle_ap(tp: &[bool], num_gt: usize) -> f64 {
    let prec: Vec<f64> =
        (0..tp.len()).map(|i| tp[..=i].iter().filter(|&&x| x).count() as f64 / (i + 1) as f64).collect();
    (0..tp.len()).filter(|&i| tp[i]).map(|i| prec[i..].iter().cloned().fold(0.0, f64::max) / num_gt as f64).sum()
}

fn oracle_map(preds: &[MomentPrediction], gt: &[MomentAnnotation], classes: usize, t: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..classes {
        let mut gts: BTreeMap<String, Vec<TemporalSegment>> = BTreeMap::new();
        for a in gt.iter().filter(|a| a.category_id == c) {
            gts.entry(a.clip_id.clone()).or_default().extend(a.segments.iter().copied());
        }
        let n: usize = gts.values().map(Vec::len).sum();
        if n == 0 {
            continue;
        }
        let all: Vec<(String, TemporalSegment)> = preds
            .iter()
            .filter(|p| p.category_id == c)
            .flat_map(|p| p.segments.iter().map(move |s| (p.clip_id.clone(), *s)))
            .collect();
        let scores: Vec<f64> = all.iter().map(|(_, s)| s.score.unwrap()).collect();
        let ranked: Vec<_> = oracle_order(&scores).into_iter().map(|i| all[i].clone()).collect();
        aps.push(oracle_ap(&oracle_matches(&ranked, &gts, t), n));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn oracle_r1(preds: &[MomentPrediction], gt: &[MomentAnnotation]) -> f64 {
    let mut gts: BTreeMap<(String, usize), Vec<TemporalSegment>> = BTreeMap::new();
    for a in gt {
        gts.entry((a.clip_id.clone(), a.category_id)).or_default().extend(a.segments.iter().copied());
    }
    let (mut hits, mut total) = (0, 0);
    for ((clip, c), g) in &gts {
        if g.is_empty() {
            continue;
        }
        total += g.len();
        let mine: Vec<TemporalSegment> = preds
            .iter()
            .filter(|p| &p.clip_id == clip && p.category_id == *c)
            .flat_map(|p| p.segments.iter().copied())
            .collect();
        let scores: Vec<f64> = mine.iter().map(|s| s.score.unwrap()).collect();
        let top: Vec<_> = oracle_order(&scores).into_iter().take(g.len()).map(|i| (clip.clone(), mine[i])).collect();
        let one = BTreeMap::from([(clip.clone(), g.clone())]);
        hits += oracle_matches(&top, &one, 0.5).iter().filter(|&&x| x).count();
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Rank of column `j` of `row`: strictly larger entries plus equal ones before it.
fn oracle_rank(row: &[f64], j: usize) -> usize {
    (0..row.len()).filter(|&i| row[i] > row[j] || (row[i] == row[j] && i < j)).count()
}

fn oracle_row_ap(sim: &[f64], rel: &[f64]) -> Option<f64> {
    let relevant: Vec<usize> = (0..rel.len()).filter(|&j| rel[j] > 0.0).collect();
    if relevant.is_empty() {
        return None;
    }
    let sum: f64 = relevant
        .iter()
        .map(|&j| {
            let r = oracle_rank(sim, j);
            let above = relevant.iter().filter(|&&i| oracle_rank(sim, i) <= r).count();
            above as f64 / (r + 1) as f64
        })
        .sum();
    Some(sum / relevant.len() as f64)
}

fn oracle_row_ndcg(sim: &[f64], rel: &[f64]) -> Option<f64> {
    let dcg: f64 = (0..rel.len()).map(|j| rel[j] / ((oracle_rank(sim, j) + 2) as f64).log2()).sum();
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal.iter().enumerate().map(|(i, r)| r / ((i + 2) as f64).log2()).sum();
    (idcg > 0.0).then(|| dcg / idcg)
}

fn oracle_directions(sim: &Matrix, rel: &Matrix, f: fn(&[f64], &[f64]) -> Option<f64>) -> (f64, f64) {
    let mean = |rows: Vec<(Vec<f64>, Vec<f64>)>| {
        let kept: Vec<f64> = rows.iter().filter_map(|(s, r)| f(s, r)).collect();
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        }
    };
    let (q, g) = sim.shape();
    let t2v =
        mean((0..q).map(|i| ((0..g).map(|j| sim[(i, j)]).collect(), (0..g).map(|j| rel[(i, j)]).collect())).collect());
    let v2t =
        mean((0..g).map(|j| ((0..q).map(|i| sim[(i, j)]).collect(), (0..q).map(|i| rel[(i, j)]).collect())).collect());
    (t2v, v2t)
}

// ---- criteria ----

const INSTANCES: usize = 200;

fn c1_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for i in 0..INSTANCES {
        let (a0, a1) = grid_segment(&mut rng, 40, 20, 0);
        let (b0, b1) = if i % 10 == 0 { (a0, a1) } else { grid_segment(&mut rng, 40, 20, 0) };
        let (a, b) = (TemporalSegment::new(a0, a1), TemporalSegment::new(b0, b1));
        ensure(close(tiou(&a, &b), oracle_tiou(&a, &b)), || format!("tiou {a:?} {b:?}"))?;
    }

    for _ in 0..INSTANCES {
        let seq = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..3)).collect()
        };
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        ensure(levenshtein(&a, &b) == oracle_levenshtein(&a, &b), || format!("levenshtein {a:?} {b:?}"))?;
    }

    for _ in 0..INSTANCES {
        let (rows, cols) = (rng.random_range(1..8), rng.random_range(1..7));
        let ints: Vec<i32> = (0..rows * cols).map(|_| rng.random_range(0..4)).collect();
        let logits = Matrix::from_vec(rows, cols, ints.iter().map(|&x| f64::from(x)).collect());
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
        let k = rng.random_range(1..=cols);
        let hits = (0..rows)
            .filter(|&r| {
                let mut order: Vec<usize> = (0..cols).collect();
                order.sort_by_key(|&j| (-ints[r * cols + j], j));
                order[..k].contains(&labels[r])
            })
            .count();
        let got = topk_accuracy(&logits, &labels, k).map_err(e2s)?;
        ensure(close(got, hits as f64 / rows as f64), || format!("top-{k} accuracy {got} vs {hits}/{rows}"))?;
    }

    let (ks, tious) = ([1usize, 3, 5], [0.1, 0.3, 0.5, 0.7]);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..8);
        let gt: Vec<GroundingQuery> = (0..n)
            .map(|q| {
                let (a, b) = grid_segment(&mut rng, 60, 30, 1);
                GroundingQuery {
                    query_id: format!("q{q}"),
                    clip_id: "c".into(),
                    query_text: "x".into(),
                    gt: Some(TemporalSegment::new(a, b)),
                    duration_s: 25.0,
                }
            })
            .collect();
        let mut preds: Vec<GroundingPrediction> = (0..n)
            .filter_map(|q| {
                rng.random_bool(0.8).then(|| GroundingPrediction {
                    query_id: format!("q{q}"),
                    segments: (0..rng.random_range(0..8)).map(|_| scored(&mut rng)).collect(),
                })
            })
            .collect();
        preds.shuffle(&mut rng);
        let table = eval_grounding(&preds, &gt, &ks, &tious).map_err(e2s)?;
        for &k in &ks {
            for &t in &tious {
                let (got, want) = (table.get(k, t).unwrap(), oracle_recall(&preds, &gt, k, t));
                ensure(close(got, want), || format!("R{k}@{t}: {got} vs oracle {want}"))?;
            }
        }
    }

    for _ in 0..INSTANCES {
        let classes = 3;
        let clips: Vec<String> = (0..rng.random_range(1..4)).map(|c| format!("clip{c}")).collect();
        let mut gt = Vec::new();
        let mut preds = Vec::new();
        for clip in &clips {
            for c in 0..classes {
                if rng.random_bool(0.6) {
                    let segments = (0..rng.random_range(1..4))
                        .map(|_| {
                            let (a, b) = grid_segment(&mut rng, 60, 30, 1);
                            TemporalSegment::new(a, b)
                        })
                        .collect();
                    gt.push(MomentAnnotation { clip_id: clip.clone(), category_id: c, segments, duration_s: 25.0 });
                }
                if rng.random_bool(0.7) {
                    let segments = (0..rng.random_range(0..7)).map(|_| scored(&mut rng)).collect();
                    preds.push(MomentPrediction { clip_id: clip.clone(), category_id: c, segments });
                }
            }
        }
        if rng.random_bool(0.3) {
            // detections on a clip nobody annotated are false positives
            let segments = (0..3).map(|_| scored(&mut rng)).collect();
            preds.push(MomentPrediction {
                clip_id: "elsewhere".into(),
                category_id: rng.random_range(0..classes),
                segments,
            });
        }
        preds.shuffle(&mut rng);
        let r = average_map(&preds, &gt, classes, &MAP_TIOUS).map_err(e2s)?;
        let per: Vec<f64> = MAP_TIOUS.iter().map(|&t| oracle_map(&preds, &gt, classes, t)).collect();
        for (t, (got, want)) in MAP_TIOUS.iter().zip(r.per_threshold.iter().zip(&per)) {
            ensure(close(*got, *want), || format!("mAP@{t}: {got} vs oracle {want}"))?;
        }
        let avg = per.iter().sum::<f64>() / per.len() as f64;
        ensure(close(r.average_map, avg), || format!("average mAP {} vs {avg}", r.average_map))?;
        let r1 = oracle_r1(&preds, &gt);
        ensure(close(r.r1_at_05, r1), || format!("R1@0.5 {} vs {r1}", r.r1_at_05))?;
    }

    for _ in 0..INSTANCES {
        let (q, g) = (rng.random_range(1..7), rng.random_range(1..7));
        let sim = Matrix::from_vec(q, g, (0..q * g).map(|_| rng.random_range(0..5) as f64 / 4.0).collect());
        let grades = [0.0, 0.0, 0.0, 0.25, 0.5, 1.0];
        let rel = Matrix::from_vec(q, g, (0..q * g).map(|_| grades[rng.random_range(0..grades.len())]).collect());
        let relevance = RelevanceMatrix { values: rel.clone(), unparsed: 0 };
        let m = retrieval_map(&sim, &relevance).map_err(e2s)?;
        let (t2v, v2t) = oracle_directions(&sim, &rel, oracle_row_ap);
        ensure(close(m.t2v, t2v) && close(m.v2t, v2t) && close(m.avg, 0.5 * (t2v + v2t)), || {
            format!("retrieval mAP {m:?} vs oracle t2v {t2v} v2t {v2t}")
        })?;
        let d = retrieval_ndcg(&sim, &relevance).map_err(e2s)?;
        let (t2v, v2t) = oracle_directions(&sim, &rel, oracle_row_ndcg);
        ensure(close(d.t2v, t2v) && close(d.v2t, v2t) && close(d.avg, 0.5 * (t2v + v2t)), || {
            format!("retrieval nDCG {d:?} vs oracle t2v {t2v} v2t {v2t}")
        })?;
    }

    for _ in 0..INSTANCES {
        let n = rng.random_range(1..5);
        let token = |rng: &mut ChaCha8Rng| ActionToken { verb: rng.random_range(0..3), noun: rng.random_range(0..3) };
        let gts: Vec<Vec<ActionToken>> = (0..n).map(|_| (0..FUTURE_LEN).map(|_| token(&mut rng)).collect()).collect();
        let sets: Vec<Vec<Vec<ActionToken>>> = (0..n)
            .map(|_| (0..rng.random_range(1..4)).map(|_| (0..FUTURE_LEN).map(|_| token(&mut rng)).collect()).collect())
            .collect();
        let r = edit_distance_eval(&sets, &gts).map_err(e2s)?;
        let (mut v, mut nn, mut a) = (0, 0, 0);
        for (cands, gt) in sets.iter().zip(&gts) {
            let part = |f: fn(&ActionToken) -> usize, xs: &[ActionToken]| xs.iter().map(f).collect::<Vec<_>>();
            v += cands.iter().map(|c| memo_levenshtein(&part(|t| t.verb, c), &part(|t| t.verb, gt))).min().unwrap();
            nn += cands.iter().map(|c| memo_levenshtein(&part(|t| t.noun, c), &part(|t| t.noun, gt))).min().unwrap();
            a += cands.iter().map(|c| memo_levenshtein(c, gt)).min().unwrap();
        }
        let scale = |x: usize| 100.0 * x as f64 / (FUTURE_LEN * n) as f64;
        ensure(close(r.verb, scale(v)) && close(r.noun, scale(nn)) && close(r.action, scale(a)), || {
            format!("edit distance {r:?} vs oracle {} {} {}", scale(v), scale(nn), scale(a))
        })?;
    }
    Ok(format!("8 metrics × {INSTANCES} instances match their oracles"))
}

fn c2_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, d) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let tau = rng.random_range(0.05..1.0);
        let v = Matrix::randn(b, d, 1.0, &mut rng);
        let t = Matrix::randn(b, d, 1.0, &mut rng);
        let out = contrastive_loss(&v, &t, tau).map_err(e2s)?;
        let h = 1e-5;
        let loss = |v: &Matrix, t: &Matrix, tau: f64| contrastive_loss(v, t, tau).unwrap().loss;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for k in 0..b * d {
            for (which, grad) in [(0, &out.grad_video), (1, &out.grad_text)] {
                let (mut plus, mut minus) = ([v.clone(), t.clone()], [v.clone(), t.clone()]);
                plus[which].as_mut_slice()[k] += h;
                minus[which].as_mut_slice()[k] -= h;
                numeric.push((loss(&plus[0], &plus[1], tau) - loss(&minus[0], &minus[1], tau)) / (2.0 * h));
                analytic.push(grad.as_slice()[k]);
            }
        }
        numeric.push((loss(&v, &t, tau + h) - loss(&v, &t, tau - h)) / (2.0 * h));
        analytic.push(out.grad_tau);
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic) + norm(&numeric);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("worst relative error {worst:.2e} over 50 draws"))
}

fn c3_stage2_signal() -> Outcome {
    let world = generate_world(&WorldConfig::pair_reference()).map_err(e2s)?;
    let cfg = PretrainConfig::default();
    let pairs = TrainingPair::from_corpus(&world.pairs, &world.clips, cfg.frames_per_pair).map_err(e2s)?;
    ensure(pairs.len() == 256, || format!("{} pairs", pairs.len()))?;
    let (train, held) = pairs.split_at(192);
    let out = post_pretrain(&Encoders::new(EncoderConfig::default()).map_err(e2s)?, train, &cfg).map_err(e2s)?;
    let losses = &out.state.epoch_losses;
    ensure(losses.len() == 5 && losses[4] < losses[0], || format!("epoch losses {losses:?}"))?;
    let videos: Vec<_> = held.iter().map(|p| p.frames.clone()).collect();
    let captions: Vec<&str> = held.iter().map(|p| p.caption.as_str()).collect();
    let sim =
        similarity_matrix(&out.encoders.encode_videos(&videos).map_err(e2s)?, &out.encoders.encode_texts(&captions))
            .map_err(e2s)?;
    let r1 = paired_recall_at_k(&sim, 1).map_err(e2s)?;
    ensure(r1 >= 5.0 / 64.0, || format!("held-out T2V R@1 {r1:.3} below 5/64"))?;
    Ok(format!("loss {:.3} -> {:.3}; held-out T2V R@1 {r1:.3} ({:.1}x chance)", losses[0], losses[4], r1 * 64.0))
}

/// Reads the stage-2 and fine-tuned towers of a finished run and scores both
/// on the held-out segments of that run.
fn c4_transfer_direction(root: &Path) -> Outcome {
    let cfg = RunConfig::desk();
    let world = load_world(&root.join("corpus").join("world")).map_err(e2s)?;
    let split = VideoSplit::new(&world, cfg.test_fraction).map_err(e2s)?;
    let test: Vec<_> =
        world.annotations.segments.iter().filter(|s| split.test_clips.contains(&s.clip_id)).cloned().collect();
    let items = RetrievalItem::from_segments(&test, &world.clips, cfg.ek_mir.frames_per_item).map_err(e2s)?;
    let load = |p: PathBuf| Checkpoint::load(&p).and_then(|c| Encoders::from_checkpoint(&c)).map_err(e2s);
    let zs = evaluate_retrieval(&load(root.join("pretrain").join("encoders.ckpt"))?, &items).map_err(e2s)?;
    let ft = evaluate_retrieval(&load(root.join("ek_mir").join("finetuned.ckpt"))?, &items).map_err(e2s)?;
    ensure(ft.map.t2v > zs.map.t2v, || format!("fine-tuned T2V mAP {:.4} vs zero-shot {:.4}", ft.map.t2v, zs.map.t2v))?;
    Ok(format!("T2V mAP zero-shot {:.4} -> fine-tuned {:.4} on {} items", zs.map.t2v, ft.map.t2v, items.len()))
}

fn c5_grounding_overfit() -> Outcome {
    let world = generate_world(&WorldConfig::reference()).map_err(e2s)?;
    let train: Vec<GroundingQuery> = queries_from_annotations(&world.annotations.nlq).into_iter().take(50).collect();
    let clips: HashSet<&str> = train.iter().map(|q| q.clip_id.as_str()).collect();
    let narration: Vec<GroundingQuery> = queries_from_annotations(&world.annotations.naq)
        .into_iter()
        .filter(|q| clips.contains(q.clip_id.as_str()))
        .collect();
    let used: Vec<_> = world.clips.iter().filter(|c| clips.contains(c.id.as_str())).cloned().collect();
    let enc = Encoders::new(EncoderConfig::default()).map_err(e2s)?;
    let tracks = extract_tracks(&used, &enc, SNIPPET_LEN, SNIPPET_STRIDE).map_err(e2s)?;
    let cfg = GroundingConfig::desk();
    let out = train_grounding(Some(&narration), &train, &tracks, &cfg).map_err(e2s)?;
    let phases = cfg.pretrain.epochs + cfg.finetune.epochs;
    ensure(out.state.epoch_losses.len() == phases, || {
        format!("{} epochs recorded, {phases} scheduled", out.state.epoch_losses.len())
    })?;
    let preds = predict_grounding(&out.model, &train, &tracks).map_err(e2s)?;
    let r = eval_grounding(&preds, &train, &[1], &[0.5]).map_err(e2s)?.get(1, 0.5).unwrap();
    ensure(r >= 0.5, || format!("training R1@0.5 {r:.3}"))?;
    Ok(format!(
        "training R1@0.5 {r:.3} after {} pretrain + {} fine-tune epochs on {} narration and {} queries",
        cfg.pretrain.epochs,
        cfg.finetune.epochs,
        narration.len(),
        train.len()
    ))
}

fn random_track(n: usize, dim: usize, seed: u64) -> SnippetFeatureTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SnippetFeatureTrack {
        clip_id: format!("clip_{seed}"),
        features: Matrix::randn(n, dim, 1.0, &mut rng),
        snippet_len: 16,
        stride: 16,
        fps: 8.0,
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn c6_moments_and_ensembles() -> Outcome {
    // overfit: two moments of different categories in one clip
    let t = random_track(16, 8, 5);
    let ann = |c: usize, a: f64, b: f64| MomentAnnotation {
        clip_id: t.clip_id.clone(),
        category_id: c,
        segments: vec![TemporalSegment::new(a, b)],
        duration_s: 32.0,
    };
    let gt = vec![ann(0, 4.0, 12.0), ann(1, 18.0, 26.0)];
    let cfg = MomentsConfig { phase: PhaseConfig::new(1, 300, 10, 3e-3), ..MomentsConfig::default() };
    let model = train_moments(&gt, std::slice::from_ref(&t), 2, &cfg).map_err(e2s)?.model;
    let det = model.detect_moments(&t, 32.0).map_err(e2s)?;
    let preds = det.predictions(0.5, 1e-3, 20).map_err(e2s)?;
    let mut worst = f64::INFINITY;
    for g in &gt {
        let best = preds
            .iter()
            .filter(|p| p.category_id == g.category_id)
            .flat_map(|p| p.segments.first())
            .map(|s| tiou(s, &g.segments[0]))
            .fold(0.0, f64::max);
        worst = worst.min(best);
    }
    ensure(worst >= 0.9, || format!("top detection tIoU {worst:.3}"))?;

    // identical members decode identically
    let reference = det.predictions(cfg.nms_sigma, cfg.score_floor, cfg.max_candidates).map_err(e2s)?;
    for k in 1..=4 {
        let outputs: Vec<_> =
            (0..k).map(|_| model.clone().detect_moments(&t, 32.0)).collect::<Result<_, _>>().map_err(e2s)?;
        let merged = ensemble_detections(&outputs).map_err(e2s)?;
        let decoded = merged.predictions(cfg.nms_sigma, cfg.score_floor, cfg.max_candidates).map_err(e2s)?;
        ensure(decoded == reference, || format!("{k} identical members changed the decoded segments"))?;
    }

    // logit averaging: idempotent and order-free, every permutation for k ≤ 4
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for k in 1..=4 {
        for _ in 0..25 {
            let members: Vec<Matrix> = (0..k).map(|_| Matrix::randn(3, 5, 2.0, &mut rng)).collect();
            let same = average_logits(&LogitBundle::new(vec![members[0].clone(); k]).map_err(e2s)?);
            ensure(same == members[0], || format!("average of {k} copies differs from the member"))?;
            let base = average_logits(&LogitBundle::new(members.clone()).map_err(e2s)?);
            for p in permutations(k) {
                let shuffled: Vec<Matrix> = p.iter().map(|&i| members[i].clone()).collect();
                ensure(average_logits(&LogitBundle::new(shuffled).map_err(e2s)?) == base, || {
                    format!("order {p:?} changed the average")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "overfit tIoU ≥ {worst:.3}; identical ensembles k=1..4 decode identically; {checked} averaging orders agree"
    ))
}

fn c7_anticipation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let token = |rng: &mut ChaCha8Rng| ActionToken { verb: rng.random_range(0..4), noun: rng.random_range(0..4) };
    let gts: Vec<Vec<ActionToken>> = (0..100).map(|_| (0..FUTURE_LEN).map(|_| token(&mut rng)).collect()).collect();
    let five: Vec<Vec<Vec<ActionToken>>> =
        (0..100).map(|_| (0..5).map(|_| (0..FUTURE_LEN).map(|_| token(&mut rng)).collect()).collect()).collect();
    let one: Vec<Vec<Vec<ActionToken>>> = five.iter().map(|c| c[..1].to_vec()).collect();
    let e1 = edit_distance_eval(&one, &gts).map_err(e2s)?;
    let e5 = edit_distance_eval(&five, &gts).map_err(e2s)?;
    ensure(e5.verb <= e1.verb && e5.noun <= e1.noun && e5.action <= e1.action, || format!("K=5 {e5:?} vs K=1 {e1:?}"))?;

    let cyclic = |seed: u64, clips: usize| -> Result<(WorldConfig, Vec<AnticipationExample>), String> {
        let cfg = WorldConfig {
            seed,
            num_clips: clips,
            sequence: SequenceModel::Cyclic,
            lta_stride: 1,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).map_err(e2s)?;
        Ok((cfg, w.annotations.anticipation.iter().map(AnticipationExample::from).collect()))
    };
    let (cfg, train) = cyclic(5, 96)?;
    let (_, held) = cyclic(11, 48)?;
    let lta = LTATrainConfig { epochs: 30, k: 1, ..LTATrainConfig::desk() };
    let out = train_forecaster(&train, cfg.num_verbs, cfg.num_nouns, &lta).map_err(e2s)?;
    let candidates = predict_candidates(&out.model, &held, &lta).map_err(e2s)?;
    let ed = eval_candidates(&candidates, &held).map_err(e2s)?;
    ensure(ed.action == 0.0, || format!("greedy action ED {:.3} on the cyclic world", ed.action))?;
    Ok(format!("action ED K=1 {:.2} >= K=5 {:.2}; greedy ED 0 on {} cyclic examples", e1.action, e5.action, held.len()))
}

fn c8_firewall() -> Outcome {
    let small = WorldConfig { num_clips: 12, ..WorldConfig::pair_reference() };
    let src = generate_world(&small).map_err(e2s)?;
    let tgt =
        generate_world(&WorldConfig { seed: 3, shift: DomainShift { hue_degrees: 40.0, speed: 1.5 }, ..small.clone() })
            .map_err(e2s)?;
    let frames = 4;
    let items = |w: &egovideo::corpus::World, prefix: &str| -> Result<Vec<DomainItem>, String> {
        let clips = LabeledClip::from_segments(&w.annotations.segments, &w.clips, frames).map_err(e2s)?;
        Ok(w.annotations
            .segments
            .iter()
            .zip(clips)
            .map(|(s, clip)| DomainItem { id: format!("{prefix}/{}", s.item_id), clip })
            .collect())
    };
    let source = items(&src, "src")?;
    let target = items(&tgt, "tgt")?;
    let mut permuted = target.clone();
    let n = permuted.len();
    for (i, item) in permuted.iter_mut().enumerate() {
        item.clip.verb = target[(i + 1) % n].clip.verb;
        item.clip.noun = (target[i].clip.noun + 1) % small.num_nouns;
    }
    let enc = Encoders::new(EncoderConfig { embed_dim: 16, hidden: 16, ..EncoderConfig::default() }).map_err(e2s)?;
    let cfg = ClassifierConfig {
        phase: PhaseConfig::new(4, 3, 1, 1e-3),
        frames_per_clip: frames,
        ..ClassifierConfig::default()
    };
    let (nv, nn) = (small.num_verbs, small.num_nouns);
    let a =
        domain_adapt_train(&DomainSplit::new(source.clone(), target).map_err(e2s)?, &enc, nv, nn, &cfg).map_err(e2s)?;
    let b = domain_adapt_train(&DomainSplit::new(source, permuted).map_err(e2s)?, &enc, nv, nn, &cfg).map_err(e2s)?;
    ensure(a.model == b.model && a.state.epoch_losses == b.state.epoch_losses, || {
        "permuted target labels changed training".into()
    })?;

    let world = generate_world(&WorldConfig::reference()).map_err(e2s)?;
    let shifted = generate_world(&WorldConfig {
        seed: 0x5eed,
        num_clips: 64,
        shift: DomainShift { hue_degrees: 40.0, speed: 1.5 },
        ..WorldConfig::reference()
    })
    .map_err(e2s)?;
    let cfg = ClassifierConfig { phase: PhaseConfig::new(16, 8, 1, 5e-3), ..ClassifierConfig::default() };
    let split = DomainSplit::from_worlds(&world, &shifted, cfg.frames_per_clip).map_err(e2s)?;
    let (nv, nn) = (world.config.num_verbs, world.config.num_nouns);
    let out = domain_adapt_train(&split, &Encoders::new(EncoderConfig::default()).map_err(e2s)?, nv, nn, &cfg)
        .map_err(e2s)?;
    let r = evaluate_target(&split, &out.model).map_err(e2s)?;
    let chance = 1.0 / (nv * nn) as f64;
    ensure(r.action_top1 > chance, || format!("target action accuracy {:.3} vs chance {chance:.3}", r.action_top1))?;
    Ok(format!(
        "permutation leaves training bit-identical; shifted-domain action top-1 {:.3} vs chance {chance:.4}",
        r.action_top1
    ))
}

fn manifests(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    Stage::ALL
        .iter()
        .map(|s| {
            let p = root.join(s.name()).join(MANIFEST_FILE);
            std::fs::read(&p).map(|b| (s.name().to_string(), b)).map_err(|e| format!("{}: {e}", p.display()))
        })
        .collect()
}

fn c9_replay(roots: &[PathBuf; 2]) -> Outcome {
    let cfg = RunConfig::desk();
    for root in roots {
        run_pipeline(&Context::new(cfg.clone(), root)).map_err(e2s)?;
    }
    let (a, b) = (manifests(&roots[0])?, manifests(&roots[1])?);
    for (stage, bytes) in &a {
        ensure(b.get(stage) == Some(bytes), || format!("{stage} manifests differ"))?;
    }
    Ok(format!("{} stage manifests byte-identical across two runs", a.len()))
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let roots = [scratch.path().join("run_a"), scratch.path().join("run_b")];
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("C1 metric oracle equivalence", Box::new(c1_metric_oracles)),
        ("C2 contrastive gradient check", Box::new(c2_gradient_check)),
        ("C3 stage-2 learning signal", Box::new(c3_stage2_signal)),
        ("C5 grounding sanity", Box::new(c5_grounding_overfit)),
        ("C6 moments and ensemble invariants", Box::new(c6_moments_and_ensembles)),
        ("C7 anticipation protocol", Box::new(c7_anticipation)),
        ("C8 domain-adaptation firewall", Box::new(c8_firewall)),
        ("C9 determinism replay", Box::new(|| c9_replay(&roots))),
        // reads the checkpoints written by the C9 runs
        ("C4 stage-3 transfer direction", Box::new(|| c4_transfer_direction(&roots[0]))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
