use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_world, SequenceModel, WorldConfig};
use crate::encoders::classification_report;

fn tok(verb: usize, noun: usize) -> ActionToken {
    ActionToken { verb, noun }
}

fn random_seq(rng: &mut ChaCha8Rng, verbs: usize, nouns: usize) -> Vec<ActionToken> {
    (0..FUTURE_LEN).map(|_| tok(rng.random_range(0..verbs), rng.random_range(0..nouns))).collect()
}

/// Textbook full-table Levenshtein.
fn dp_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn identical_candidate_scores_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_seq(&mut rng, 4, 4);
    let r = edit_distance_eval(&[vec![gt.clone()]], &[gt]).unwrap();
    assert_eq!((r.verb, r.noun, r.action), (0.0, 0.0, 0.0));
}

#[test]
fn disjoint_candidate_scores_hundred() {
    let gt: Vec<_> = (0..FUTURE_LEN).map(|i| tok(i % 2, i % 3)).collect();
    let cand: Vec<_> = (0..FUTURE_LEN).map(|i| tok(2 + i % 2, 3 + i % 3)).collect();
    let r = edit_distance_eval(&[vec![cand]], &[gt]).unwrap();
    assert_eq!((r.verb, r.noun, r.action), (100.0, 100.0, 100.0));
}

#[test]
fn edit_distance_matches_dp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gts: Vec<_> = (0..4).map(|_| random_seq(&mut rng, 3, 3)).collect();
    let sets: Vec<Vec<_>> = (0..4).map(|_| (0..2).map(|_| random_seq(&mut rng, 3, 3)).collect()).collect();
    let r = edit_distance_eval(&sets, &gts).unwrap();
    let mut expect = [0.0; 3];
    for (cands, gt) in sets.iter().zip(&gts) {
        let proj = |s: &[ActionToken], f: fn(&ActionToken) -> usize| s.iter().map(f).collect::<Vec<_>>();
        let fs: [fn(&ActionToken) -> usize; 3] = [|t| t.verb, |t| t.noun, |t| t.verb * 3 + t.noun];
        for (slot, f) in expect.iter_mut().zip(fs) {
            let best = cands.iter().map(|c| dp_distance(&proj(c, f), &proj(gt, f))).min().unwrap();
            *slot += best as f64 / 20.0;
        }
    }
    let expect: Vec<f64> = expect.iter().map(|v| v * 100.0 / 4.0).collect();
    assert!((r.verb - expect[0]).abs() < 1e-12);
    assert!((r.noun - expect[1]).abs() < 1e-12);
    assert!((r.action - expect[2]).abs() < 1e-12);
}

#[test]
fn edit_distance_rejects_bad_lengths() {
    let gt = vec![tok(0, 0); FUTURE_LEN];
    assert!(matches!(edit_distance_eval(&[vec![vec![tok(0, 0); 19]]], &[gt.clone()]), Err(Error::Shape(_))));
    assert!(matches!(edit_distance_eval(&[], &[gt.clone()]), Err(Error::Shape(_))));
    assert!(matches!(edit_distance_eval(&[vec![gt.clone()]], &[vec![tok(0, 0); 3]]), Err(Error::Shape(_))));
}

#[test]
fn oracle_logits_give_perfect_top1() {
    let verbs = [0, 2, 1, 3];
    let nouns = [1, 1, 0, 2];
    let one_hot = |labels: &[usize], c: usize| {
        Matrix::from_rows(
            &labels
                .iter()
                .map(|&l| (0..c).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
    };
    let r = classification_report(&one_hot(&verbs, 4), &one_hot(&nouns, 3), &verbs, &nouns).unwrap();
    assert_eq!((r.verb_top1, r.noun_top1, r.action_top1), (1.0, 1.0, 1.0));
}

#[test]
fn uniform_logits_hit_the_id_zero_base_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 50;
    let verbs: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let nouns: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let r = classification_report(&Matrix::zeros(n, 4), &Matrix::zeros(n, 3), &verbs, &nouns).unwrap();
    let count = |l: &[usize]| l.iter().filter(|&&x| x == 0).count() as f64 / n as f64;
    let both = verbs.iter().zip(&nouns).filter(|&(&v, &o)| v == 0 && o == 0).count() as f64 / n as f64;
    assert_eq!(r.verb_top1, count(&verbs));
    assert_eq!(r.noun_top1, count(&nouns));
    assert_eq!(r.action_top1, both);
}

fn cyclic_examples(seed: u64) -> (WorldConfig, Vec<AnticipationExample>) {
    let cfg =
        WorldConfig { seed, num_clips: 96, sequence: SequenceModel::Cyclic, lta_stride: 1, ..WorldConfig::default() };
    let world = generate_world(&cfg).unwrap();
    let ex = world.annotations.anticipation.iter().map(AnticipationExample::from).collect();
    (cfg, ex)
}

fn trained_cyclic() -> (WorldConfig, Vec<AnticipationExample>, ForecasterOutcome) {
    let (cfg, ex) = cyclic_examples(5);
    let lta = LTATrainConfig { epochs: 30, ..LTATrainConfig::desk() };
    let out = train_forecaster(&ex, cfg.num_verbs, cfg.num_nouns, &lta).unwrap();
    (cfg, ex, out)
}

#[test]
fn greedy_rollout_continues_a_cyclic_world() {
    let (cfg, _, out) = trained_cyclic();
    let losses = &out.state.epoch_losses;
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    let (_, held) = cyclic_examples(11);
    let a = cfg.num_actions();
    for e in held.iter().take(5) {
        let cands = out.model.predict_future(&e.history, 1, 1.0, 0).unwrap();
        let last = e.history.last().unwrap().action_id(cfg.num_nouns);
        let expect: Vec<_> =
            (1..=FUTURE_LEN).map(|i| ActionToken::from_action_id((last + i) % a, cfg.num_nouns)).collect();
        assert_eq!(cands[0], expect);
        assert_eq!(cands[0], e.future);
    }
}

#[test]
fn rollouts_have_fixed_length_and_greedy_is_deterministic() {
    let model = ActionForecaster::new(3, 4, 16, 1, 2).unwrap();
    let history = vec![tok(0, 1), tok(2, 3), tok(1, 0)];
    let a = model.predict_future(&history, 4, 1.5, 9).unwrap();
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|c| c.len() == FUTURE_LEN && c.iter().all(|t| t.verb < 3 && t.noun < 4)));
    let b = model.predict_future(&history, 1, 0.2, 123).unwrap();
    assert_eq!(a[0], b[0]);
    assert_eq!(a, model.predict_future(&history, 4, 1.5, 9).unwrap());
}

#[test]
fn predict_future_rejects_bad_inputs() {
    let model = ActionForecaster::new(3, 4, 16, 1, 2).unwrap();
    assert!(matches!(model.predict_future(&[tok(0, 0)], 0, 1.0, 0), Err(Error::Config(_))));
    assert!(matches!(model.predict_future(&[], 1, 1.0, 0), Err(Error::Shape(_))));
    assert!(matches!(model.predict_future(&[tok(0, 0); 9], 1, 1.0, 0), Err(Error::Shape(_))));
    assert!(matches!(model.predict_future(&[tok(3, 0)], 1, 1.0, 0), Err(Error::LabelOutOfRange { .. })));
    assert!(matches!(LTATrainConfig { k: 0, ..Default::default() }.validate(), Err(Error::Config(_))));
}

#[test]
fn zero_epochs_keep_initial_weights_and_checkpoint_roundtrips() {
    let (cfg, ex) = cyclic_examples(5);
    let lta = LTATrainConfig { epochs: 0, ..LTATrainConfig::default() };
    let out = train_forecaster(&ex, cfg.num_verbs, cfg.num_nouns, &lta).unwrap();
    assert_eq!(
        out.model,
        ActionForecaster::new(cfg.num_verbs, cfg.num_nouns, lta.hidden, lta.depth, lta.seed).unwrap()
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lta.ckpt");
    out.model.save(&path, out.state.clone()).unwrap();
    assert_eq!(ActionForecaster::load(&path).unwrap(), out.model);
}

#[test]
fn candidate_records_join_by_id() {
    let model = ActionForecaster::new(4, 4, 16, 1, 0).unwrap();
    let (_, ex) = cyclic_examples(5);
    let ex = &ex[..3];
    let cfg = LTATrainConfig { k: 3, ..Default::default() };
    let mut recs = predict_candidates(&model, ex, &cfg).unwrap();
    assert!(recs.iter().all(|r| r.candidates.len() == 3));
    let direct = eval_candidates(&recs, ex).unwrap();
    recs.reverse();
    assert_eq!(eval_candidates(&recs, ex).unwrap(), direct);
    recs.pop();
    assert!(eval_candidates(&recs, ex).is_err());
}

fn seq_strategy() -> impl Strategy<Value = Vec<ActionToken>> {
    prop::collection::vec((0usize..3, 0usize..3).prop_map(|(v, n)| tok(v, n)), FUTURE_LEN)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edit_distance_is_a_metric(a in seq_strategy(), b in seq_strategy(), c in seq_strategy()) {
        let d = |x: &Vec<ActionToken>, y: &Vec<ActionToken>| edit_distance_eval(&[vec![x.clone()]], &[y.clone()]).unwrap().action;
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0.0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn more_candidates_never_increase_distance(gt in seq_strategy(), cands in prop::collection::vec(seq_strategy(), 1..5), extra in seq_strategy()) {
        let base = edit_distance_eval(&[cands.clone()], &[gt.clone()]).unwrap();
        let mut more = cands;
        more.push(extra);
        let grown = edit_distance_eval(&[more], &[gt]).unwrap();
        prop_assert!(grown.verb <= base.verb && grown.noun <= base.noun && grown.action <= base.action);
        prop_assert!((0.0..=100.0).contains(&grown.action));
    }

    #[test]
    fn action_top1_bounded_by_parts(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let vl = Matrix::randn(n, 3, 1.0, &mut rng);
        let nl = Matrix::randn(n, 4, 1.0, &mut rng);
        let verbs: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let nouns: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let r = classification_report(&vl, &nl, &verbs, &nouns).unwrap();
        prop_assert!(r.action_top1 <= r.verb_top1.min(r.noun_top1));
    }
}
