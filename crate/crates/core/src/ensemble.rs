//! Logit averaging and ranked-list merging across independently trained models.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grounding::GroundingPrediction;
use crate::metrics::tiou;
use crate::moments::MomentPrediction;
use crate::temporal::Geometry;
use crate::tensor::Matrix;
use crate::TemporalSegment;

/// Two candidates from different models describe the same moment at or
/// above this overlap.
pub const MERGE_TIOU: f64 = 0.75;

/// Aligned logit tensors of several models, optionally tied to the temporal
/// geometry they were computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBundle {
    members: Vec<Matrix>,
    geometry: Option<Geometry>,
}

impl LogitBundle {
    pub fn new(members: Vec<Matrix>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Empty("logit bundle has no members".into()))?;
        if let Some(m) = members.iter().find(|m| m.shape() != first.shape()) {
            return Err(Error::Shape(format!("bundle members {:?} and {:?} differ", first.shape(), m.shape())));
        }
        Ok(Self { members, geometry: None })
    }

    /// Members must share one geometry; `geometries` pairs with `members`.
    pub fn with_geometry(members: Vec<Matrix>, geometries: &[&Geometry]) -> Result<Self> {
        if geometries.len() != members.len() {
            return Err(Error::Shape(format!("{} members but {} geometries", members.len(), geometries.len())));
        }
        let mut bundle = Self::new(members)?;
        if geometries.iter().any(|g| *g != geometries[0]) {
            return Err(Error::Shape("bundle members were computed on different geometries".into()));
        }
        if geometries[0].len() != bundle.members[0].rows() {
            return Err(Error::Shape("logit rows do not match geometry positions".into()));
        }
        bundle.geometry = Some(geometries[0].clone());
        Ok(bundle)
    }

    pub fn members(&self) -> &[Matrix] {
        &self.members
    }

    pub fn geometry(&self) -> Option<&Geometry> {
        self.geometry.as_ref()
    }
}

/// Elementwise mean of the members. Each element averages its values in
/// sorted order with a running mean, so member order never matters and
/// identical members reproduce themselves exactly.
pub fn average_logits(bundle: &LogitBundle) -> Matrix {
    let first = &bundle.members[0];
    let mut out = first.clone();
    let mut column = vec![0.0; bundle.members.len()];
    for (i, slot) in out.as_mut_slice().iter_mut().enumerate() {
        for (c, m) in column.iter_mut().zip(&bundle.members) {
            *c = m.as_slice()[i];
        }
        column.sort_by(f64::total_cmp);
        let mut mean = column[0];
        for (k, &x) in column.iter().enumerate().skip(1) {
            mean += (x - mean) / (k + 1) as f64;
        }
        *slot = mean;
    }
    out
}

fn check_weights(count: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != count {
        return Err(Error::Shape(format!("{count} inputs but {} weights", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Config("ensemble weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("ensemble weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Equal weights summing to one.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Merges per-model ranked candidate lists of one query.
///
/// A candidate's merged score is its own weighted score plus, for every
/// other model, that model's weight times the best score among its
/// candidates overlapping at `MERGE_TIOU` or more. Candidates are then taken
/// in descending merged score (ties by model, then rank); each absorbs the
/// best-overlapping unclaimed candidate of every other model at the same
/// threshold and is emitted as the score-weighted mean interval of the
/// group, scored with the seed's merged score.
pub fn merge_ranked_predictions(lists: &[Vec<TemporalSegment>], weights: &[f64]) -> Result<Vec<TemporalSegment>> {
    check_weights(lists.len(), weights)?;
    for s in lists.iter().flatten() {
        s.validate()?;
    }
    let pool: Vec<(usize, TemporalSegment)> =
        lists.iter().enumerate().flat_map(|(m, l)| l.iter().map(move |s| (m, *s))).collect();
    let merged: Vec<f64> = pool
        .iter()
        .map(|(m, c)| {
            let mut score = weights[*m] * c.score_or_zero();
            for (other, list) in lists.iter().enumerate().filter(|(o, _)| o != m) {
                let best = list
                    .iter()
                    .filter(|s| tiou(c, s) >= MERGE_TIOU)
                    .map(TemporalSegment::score_or_zero)
                    .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
                score += weights[other] * best.unwrap_or(0.0);
            }
            score
        })
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| merged[b].total_cmp(&merged[a]));
    let mut claimed = vec![false; pool.len()];
    let mut out = Vec::new();
    for &seed in &order {
        if claimed[seed] {
            continue;
        }
        claimed[seed] = true;
        let (seed_model, seed_seg) = pool[seed];
        let mut group = vec![seed];
        for other in (0..lists.len()).filter(|&o| o != seed_model) {
            let best = (0..pool.len())
                .filter(|&i| !claimed[i] && pool[i].0 == other)
                .map(|i| (i, tiou(&seed_seg, &pool[i].1)))
                .filter(|&(_, t)| t >= MERGE_TIOU)
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            if let Some((i, _)) = best {
                claimed[i] = true;
                group.push(i);
            }
        }
        let mass: f64 = group.iter().map(|&i| weights[pool[i].0] * pool[i].1.score_or_zero()).sum();
        let (start, end) = if group.len() == 1 || mass <= 0.0 {
            (seed_seg.start_s, seed_seg.end_s)
        } else {
            group.iter().fold((0.0, 0.0), |(s, e), &i| {
                let w = weights[pool[i].0] * pool[i].1.score_or_zero() / mass;
                (s + w * pool[i].1.start_s, e + w * pool[i].1.end_s)
            })
        };
        out.push(TemporalSegment { start_s: start, end_s: end, score: Some(merged[seed]), label: seed_seg.label });
    }
    Ok(out)
}

/// Per-key merge over several prediction files; keys keep first-seen order.
fn merge_keyed<K, P>(
    inputs: &[Vec<P>],
    weights: &[f64],
    key: impl Fn(&P) -> K,
    segments: impl Fn(&P) -> &[TemporalSegment],
    build: impl Fn(&K, Vec<TemporalSegment>) -> P,
) -> Result<Vec<P>>
where
    K: std::hash::Hash + Eq + Clone,
{
    check_weights(inputs.len(), weights)?;
    let mut keys: Vec<K> = Vec::new();
    let mut lists: HashMap<K, Vec<Vec<TemporalSegment>>> = HashMap::new();
    for (m, preds) in inputs.iter().enumerate() {
        for p in preds {
            let k = key(p);
            let entry = lists.entry(k.clone()).or_insert_with(|| {
                keys.push(k.clone());
                vec![Vec::new(); inputs.len()]
            });
            entry[m].extend_from_slice(segments(p));
        }
    }
    keys.iter().map(|k| Ok(build(k, merge_ranked_predictions(&lists[k], weights)?))).collect()
}

pub fn merge_grounding_predictions(
    inputs: &[Vec<GroundingPrediction>],
    weights: &[f64],
) -> Result<Vec<GroundingPrediction>> {
    merge_keyed(
        inputs,
        weights,
        |p| p.query_id.clone(),
        |p| &p.segments,
        |k, segments| GroundingPrediction { query_id: k.clone(), segments },
    )
}

pub fn merge_moment_predictions(inputs: &[Vec<MomentPrediction>], weights: &[f64]) -> Result<Vec<MomentPrediction>> {
    merge_keyed(
        inputs,
        weights,
        |p| (p.clip_id.clone(), p.category_id),
        |p| &p.segments,
        |k, segments| MomentPrediction { clip_id: k.0.clone(), category_id: k.1, segments },
    )
}
