//! Metric primitives shared by every track.
//!
//! The tIoU denominator regularizer and the lowest-index tie-break are fixed
//! here so that all modules agree bit for bit.

use crate::error::{Error, Result};
use crate::segment::TemporalSegment;
use crate::tensor::Matrix;

pub const TIOU_EPS: f64 = 1e-9;

/// Temporal IoU, `|a ∩ b| / (|a ∪ b| + ε)`; identical segments (including
/// equal points) score exactly 1.
pub fn tiou(a: &TemporalSegment, b: &TemporalSegment) -> f64 {
    if a.start_s == b.start_s && a.end_s == b.end_s {
        return 1.0;
    }
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    let union = (a.end_s.max(b.end_s) - a.start_s.min(b.start_s)).max(0.0);
    (inter / (union + TIOU_EPS)).clamp(0.0, 1.0)
}

/// Mean of precision@r over the ranks `r` holding a relevant item; 0 when
/// nothing is relevant.
pub fn average_precision(ranked_relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Detection AP: area under the precision envelope over recall, for
/// predictions already sorted by descending score. `num_gt == 0` yields 0.
pub fn interpolated_ap(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked_tp.len() + 2);
    let mut recall = Vec::with_capacity(ranked_tp.len() + 2);
    precision.push(0.0);
    recall.push(0.0);
    for (i, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    precision.push(0.0);
    recall.push(1.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Rank of `label` within `row`: entries strictly greater, plus equal
/// entries at a lower index.
pub fn label_rank(row: &[f64], label: usize) -> usize {
    let x = row[label];
    row.iter().enumerate().filter(|&(j, &v)| v > x || (v == x && j < label)).count()
}

/// Fraction of rows whose label is among the `k` largest logits.
pub fn topk_accuracy(logits: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("top-k accuracy needs k >= 1".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::LabelOutOfRange { label, classes: logits.cols() });
        }
        if label_rank(logits.row(r), label) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(a: f64, b: f64) -> TemporalSegment {
        TemporalSegment::new(a, b)
    }

    #[test]
    fn tiou_closed_forms() {
        assert_eq!(tiou(&seg(1.0, 4.0), &seg(1.0, 4.0)), 1.0);
        assert_eq!(tiou(&seg(2.0, 2.0), &seg(2.0, 2.0)), 1.0);
        assert_eq!(tiou(&seg(0.0, 1.0), &seg(2.0, 3.0)), 0.0);
        assert!((tiou(&seg(0.0, 2.0), &seg(1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(tiou(&seg(2.0, 2.0), &seg(0.0, 4.0)), 0.0);
    }

    #[test]
    fn ap_closed_forms() {
        assert_eq!(average_precision(&[true, true, true]), 1.0);
        assert_eq!(average_precision(&[false, true]), 0.5);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }

    #[test]
    fn interpolated_ap_perfect_and_empty() {
        assert!((interpolated_ap(&[true, true], 2) - 1.0).abs() < 1e-12);
        assert_eq!(interpolated_ap(&[], 3), 0.0);
        // one hit at rank 2 of 1 gt: envelope precision 0.5 over recall [0,1]
        assert!((interpolated_ap(&[false, true], 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein::<u32>(&[], &[4, 5]), 2);
        assert_eq!(levenshtein(&['k', 'i', 't', 't', 'e', 'n'], &['s', 'i', 't', 't', 'i', 'n', 'g']), 3);
    }

    #[test]
    fn topk_edge_cases() {
        let logits = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(topk_accuracy(&logits, &[1, 0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&logits, &[2, 2], 3).unwrap(), 1.0);
        // tie between ids 0 and 2 in row 0 goes to id 0
        assert_eq!(topk_accuracy(&logits, &[2, 1], 2).unwrap(), 0.5);
        assert!(matches!(topk_accuracy(&logits, &[3, 0], 1), Err(Error::LabelOutOfRange { .. })));
        assert!(topk_accuracy(&logits, &[0, 0], 0).is_err());
    }

    fn arb_seg() -> impl Strategy<Value = TemporalSegment> {
        (0.0..50.0f64, 0.0..20.0f64).prop_map(|(s, l)| seg(s, s + l))
    }

    proptest! {
        #[test]
        fn tiou_is_symmetric_and_bounded(a in arb_seg(), b in arb_seg()) {
            let x = tiou(&a, &b);
            prop_assert_eq!(x, tiou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(tiou(&a, &a), 1.0);
        }

        #[test]
        fn ap_ignores_trailing_misses(flags in prop::collection::vec(any::<bool>(), 0..20), pad in 0usize..10) {
            let mut padded = flags.clone();
            padded.extend(std::iter::repeat_n(false, pad));
            prop_assert_eq!(average_precision(&flags), average_precision(&padded));
        }

        #[test]
        fn levenshtein_is_a_metric(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8),
            c in prop::collection::vec(0u8..4, 0..8),
        ) {
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        }

        #[test]
        fn topk_nondecreasing_in_k(vals in prop::collection::vec(-3i8..3, 20), labels in prop::collection::vec(0usize..4, 5)) {
            let logits = Matrix::from_vec(5, 4, vals.iter().map(|&v| f64::from(v)).collect());
            let mut last = 0.0;
            for k in 1..=4 {
                let acc = topk_accuracy(&logits, &labels, k).unwrap();
                prop_assert!(acc >= last);
                last = acc;
            }
            prop_assert_eq!(last, 1.0);
        }
    }
}
