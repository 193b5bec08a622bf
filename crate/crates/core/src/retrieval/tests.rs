use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_world, WorldConfig};
use crate::encoders::EncoderConfig;
use crate::train::PhaseConfig;

fn rel(values: Vec<Vec<f64>>) -> RelevanceMatrix {
    RelevanceMatrix { values: Matrix::from_rows(&values), unparsed: 0 }
}

/// Order by descending score, then ascending index, by explicit comparison.
fn oracle_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    for i in 0..idx.len() {
        for j in 0..idx.len() - 1 - i {
            let (a, b) = (idx[j], idx[j + 1]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                idx.swap(j, j + 1);
            }
        }
    }
    idx
}

/// Precision at every relevant rank, recomputed from scratch per rank.
fn oracle_ap(scores: &[f64], rel: &[f64]) -> Option<f64> {
    let order = oracle_order(scores);
    let relevant: Vec<usize> = (0..order.len()).filter(|&r| rel[order[r]] > 0.0).collect();
    if relevant.is_empty() {
        return None;
    }
    let precisions: Vec<f64> =
        relevant.iter().map(|&r| (0..=r).filter(|&i| rel[order[i]] > 0.0).count() as f64 / (r + 1) as f64).collect();
    Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

fn oracle_ndcg(scores: &[f64], rel: &[f64]) -> Option<f64> {
    let mut dcg = 0.0;
    for (r, &j) in oracle_order(scores).iter().enumerate() {
        dcg += rel[j] / ((r + 2) as f64).ln() * std::f64::consts::LN_2;
    }
    let mut sorted = rel.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut ideal = 0.0;
    for (r, &g) in sorted.iter().enumerate() {
        ideal += g / ((r + 2) as f64).ln() * std::f64::consts::LN_2;
    }
    (ideal > 0.0).then(|| dcg / ideal)
}

fn oracle_mean(sim: &Matrix, rel: &Matrix, f: fn(&[f64], &[f64]) -> Option<f64>) -> f64 {
    let vals: Vec<f64> = (0..sim.rows()).filter_map(|r| f(sim.row(r), rel.row(r))).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn random_instance(q: usize, g: usize, seed: u64, graded: bool) -> (Matrix, RelevanceMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = Matrix::from_vec(q, g, (0..q * g).map(|_| (rng.random_range(0..7) as f64) / 6.0).collect());
    let mut values: Vec<f64> = (0..q * g)
        .map(|_| if graded { [0.0, 0.25, 0.5, 1.0][rng.random_range(0..4)] } else { f64::from(rng.random_bool(0.4)) })
        .collect();
    // every query and every gallery item gets something relevant
    for i in 0..q.min(g) {
        values[i * g + i] = 1.0;
    }
    (sim, RelevanceMatrix { values: Matrix::from_vec(q, g, values), unparsed: 0 })
}

#[test]
fn similarity_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = Matrix::randn(3, 5, 1.0, &mut rng).l2_normalize_rows();
    let s = similarity_matrix(&e, &e).unwrap();
    for i in 0..3 {
        assert!((s[(i, i)] - 1.0).abs() < 1e-12);
    }
    let ortho =
        similarity_matrix(&Matrix::from_rows(&[vec![1.0, 0.0]]), &Matrix::from_rows(&[vec![0.0, 1.0]])).unwrap();
    assert_eq!(ortho[(0, 0)], 0.0);
    assert!(matches!(similarity_matrix(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)), Err(Error::Shape(_))));
}

#[test]
fn similarity_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Matrix::randn(4, 6, 1.0, &mut rng).l2_normalize_rows();
    let t = Matrix::randn(3, 6, 1.0, &mut rng).l2_normalize_rows();
    let s = similarity_matrix(&v, &t).unwrap();
    assert_eq!(s.shape(), (3, 4));
    for q in 0..3 {
        for g in 0..4 {
            let mut acc = 0.0;
            for d in 0..6 {
                acc += t[(q, d)] * v[(g, d)];
            }
            assert!((s[(q, g)] - acc).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&s[(q, g)]));
        }
    }
    assert_eq!(similarity_matrix(&t, &v).unwrap(), s.transpose());
}

#[test]
fn relevance_closed_forms() {
    let r = build_relevance(
        &["C cuts the tomato", "C cuts the tomato"],
        &["C cuts the tomato", "C washes a knife", "C cuts the onion"],
    );
    assert_eq!(r.values.row(0), &[1.0, 0.0, 0.5]);
    assert_eq!(r.unparsed, 0);
    let r = build_relevance(&["nothing recognisable here"], &["C cuts the tomato"]);
    assert_eq!(r.values.row(0), &[0.0]);
    assert_eq!(r.unparsed, 1);
    // sets with more than one member
    let r = build_relevance(&["C cuts the tomato then washes the knife"], &["C cuts the knife"]);
    assert!((r.values[(0, 0)] - 0.5 * (0.5 + 0.5)).abs() < 1e-12);
}

#[test]
fn map_closed_forms() {
    let ideal = rel(vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]);
    let sim = Matrix::from_rows(&[vec![0.9, 0.8, 0.1], vec![0.1, 0.9, 0.8]]);
    let m = retrieval_map(&sim, &ideal).unwrap();
    assert_eq!(m.t2v, 1.0);
    for r in 1..=5usize {
        let mut row = vec![0.0; 6];
        row[r - 1] = 1.0;
        let sim = Matrix::row_vector(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4]);
        let m = retrieval_map(&sim, &rel(vec![row])).unwrap();
        assert!((m.t2v - 1.0 / r as f64).abs() < 1e-12);
    }
    let zero_row = rel(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
    let m = retrieval_map(&Matrix::zeros(2, 2), &zero_row).unwrap();
    assert_eq!((m.excluded_t2v, m.excluded_v2t), (1, 1));
    assert_eq!(m.t2v, 1.0);
}

#[test]
fn map_matches_rank_scan_oracle() {
    let (sim, r) = random_instance(5, 6, 11, false);
    let m = retrieval_map(&sim, &r).unwrap();
    assert!((m.t2v - oracle_mean(&sim, &r.values, oracle_ap)).abs() < 1e-12);
    assert!((m.v2t - oracle_mean(&sim.transpose(), &r.values.transpose(), oracle_ap)).abs() < 1e-12);
    assert!((m.avg - 0.5 * (m.t2v + m.v2t)).abs() < 1e-15);
}

#[test]
fn ndcg_closed_forms_and_oracle() {
    let r = rel(vec![vec![1.0, 0.0, 0.0, 0.0]]);
    let sorted = retrieval_ndcg(&Matrix::row_vector(&[0.9, 0.5, 0.4, 0.1]), &r).unwrap();
    assert!((sorted.t2v - 1.0).abs() < 1e-12);
    let reversed = retrieval_ndcg(&Matrix::row_vector(&[0.1, 0.4, 0.5, 0.9]), &r).unwrap();
    assert!((reversed.t2v - 1.0 / 5f64.log2()).abs() < 1e-12);
    let (sim, r) = random_instance(4, 5, 3, true);
    let n = retrieval_ndcg(&sim, &r).unwrap();
    assert!((n.t2v - oracle_mean(&sim, &r.values, oracle_ndcg)).abs() < 1e-12);
    assert!((n.v2t - oracle_mean(&sim.transpose(), &r.values.transpose(), oracle_ndcg)).abs() < 1e-12);
}

#[test]
fn metrics_reject_bad_inputs() {
    assert!(matches!(retrieval_map(&Matrix::zeros(2, 3), &rel(vec![vec![1.0, 0.0]])), Err(Error::Shape(_))));
    assert!(matches!(retrieval_ndcg(&Matrix::zeros(1, 1), &rel(vec![vec![1.5]])), Err(Error::Config(_))));
}

#[test]
fn paired_recall_counts_diagonal_hits() {
    let sim = Matrix::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.8, 0.7, 0.0], vec![0.0, 0.0, 0.0]]);
    assert!((paired_recall_at_k(&sim, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((paired_recall_at_k(&sim, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(paired_recall_at_k(&sim, 3).unwrap(), 1.0);
}

#[test]
fn recognition_csv_roundtrip() {
    let preds = vec![
        RecognitionPrediction { clip_id: "a_0".into(), verb_id: 1, noun_id: 3 },
        RecognitionPrediction { clip_id: "b_2".into(), verb_id: 0, noun_id: 0 },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ar.csv");
    write_recognition_csv(&path, &preds).unwrap();
    assert_eq!(read_recognition_csv(&path).unwrap(), preds);
    std::fs::write(&path, "clip_id,verb_id,noun_id\nx,1\n").unwrap();
    assert!(matches!(read_recognition_csv(&path), Err(Error::Format { .. })));
}

fn small_encoder() -> Encoders {
    Encoders::new(EncoderConfig { embed_dim: 16, hidden: 16, ..EncoderConfig::default() }).unwrap()
}

fn small_split(permute: bool) -> DomainSplit {
    let cfg = WorldConfig { num_clips: 8, ..WorldConfig::pair_reference() };
    let src = generate_world(&cfg).unwrap();
    let tgt = generate_world(&WorldConfig { seed: 3, ..cfg }).unwrap();
    let mut split = DomainSplit::from_worlds(&src, &tgt, 4).unwrap();
    if permute {
        let n = split.target_labels.verbs.len();
        split.target_labels.verbs.rotate_left(1);
        split.target_labels.nouns = (0..n).map(|i| (split.target_labels.nouns[i] + 1) % 4).collect();
    }
    split
}

#[test]
fn target_labels_are_sealed_during_training() {
    let split = small_split(false);
    assert!(split.target_labels().read().is_ok());
    {
        let _seal = split.seal();
        assert!(matches!(split.target_labels().read(), Err(Error::FirewallViolation)));
        let copy = split.clone();
        assert!(matches!(copy.target_labels().read(), Err(Error::FirewallViolation)));
    }
    assert!(split.target_labels().read().is_ok());
}

#[test]
fn permuting_target_labels_leaves_training_unchanged() {
    let cfg = ClassifierConfig { phase: PhaseConfig::new(4, 2, 1, 1e-3), frames_per_clip: 4, ..Default::default() };
    let enc = small_encoder();
    let a = domain_adapt_train(&small_split(false), &enc, 4, 4, &cfg).unwrap();
    let b = domain_adapt_train(&small_split(true), &enc, 4, 4, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.state.epoch_losses, b.state.epoch_losses);
}

#[test]
fn domain_items_must_be_disjoint() {
    let clip = LabeledClip { frames: Frames::new(1, 4, 4, 3, vec![0; 48]), verb: 0, noun: 0 };
    let item = |id: &str| DomainItem { id: id.into(), clip: clip.clone() };
    assert!(matches!(DomainSplit::new(vec![item("a")], vec![item("a")]), Err(Error::Config(_))));
    assert!(matches!(DomainSplit::new(vec![], vec![item("a")]), Err(Error::EmptyCorpus)));
}

#[test]
fn zero_epoch_finetune_is_the_zero_shot_model() {
    let cfg = WorldConfig { num_clips: 4, ..WorldConfig::pair_reference() };
    let w = generate_world(&cfg).unwrap();
    let items = RetrievalItem::from_segments(&w.annotations.segments, &w.clips, 4).unwrap();
    let enc = small_encoder();
    let out = finetune_retrieval(&enc, &items, &PretrainConfig { epochs: 0, ..retrieval_finetune_config() }).unwrap();
    assert_eq!(out.encoders, enc);
    let report = evaluate_retrieval(&enc, &items).unwrap();
    assert!((0.0..=1.0).contains(&report.map.avg) && (0.0..=1.0).contains(&report.ndcg.avg));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_invariant_under_increasing_transforms(seed in 0u64..10_000) {
        let (sim, r) = random_instance(4, 5, seed, true);
        let warped = sim.map(|x| (3.0 * x).exp() - 7.0);
        prop_assert_eq!(retrieval_map(&sim, &r).unwrap(), retrieval_map(&warped, &r).unwrap());
        prop_assert_eq!(retrieval_ndcg(&sim, &r).unwrap(), retrieval_ndcg(&warped, &r).unwrap());
    }

    #[test]
    fn ideal_rankings_score_one(seed in 0u64..10_000) {
        let (_, r) = random_instance(3, 6, seed, true);
        let sim = r.values.clone();
        let n = retrieval_ndcg(&sim, &r).unwrap();
        let m = retrieval_map(&sim, &r).unwrap();
        prop_assert!((n.t2v - 1.0).abs() < 1e-12 && (n.v2t - 1.0).abs() < 1e-12);
        prop_assert!((m.t2v - 1.0).abs() < 1e-12 && (m.v2t - 1.0).abs() < 1e-12);
        let (sim, r) = random_instance(3, 6, seed, true);
        let n = retrieval_ndcg(&sim, &r).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n.t2v) && (0.0..=1.0 + 1e-12).contains(&n.v2t));
    }

    #[test]
    fn transposed_problem_swaps_directions(seed in 0u64..10_000) {
        let (sim, r) = random_instance(4, 3, seed, true);
        let rt = RelevanceMatrix { values: r.values.transpose(), unparsed: 0 };
        let a = retrieval_map(&sim, &r).unwrap();
        let b = retrieval_map(&sim.transpose(), &rt).unwrap();
        prop_assert_eq!(a.t2v, b.v2t);
        prop_assert_eq!(a.v2t, b.t2v);
        let a = retrieval_ndcg(&sim, &r).unwrap();
        let b = retrieval_ndcg(&sim.transpose(), &rt).unwrap();
        prop_assert_eq!(a.t2v, b.v2t);
    }
}
