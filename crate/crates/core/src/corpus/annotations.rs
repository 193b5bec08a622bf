//! Per-track ground truth derived from clip scripts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::vocab::render_template;
use super::world::{Clip, WorldConfig};
use crate::segment::TemporalSegment;

pub const HISTORY_LEN: usize = 8;
pub const FUTURE_LEN: usize = 20;

pub const NLQ_TEMPLATE: &str = "when did i {verb_base} the {noun}";
pub const STEP_TEMPLATE: &str = "{verb_base} the {noun}";
pub const NARRATION_TEMPLATES: [&str; 5] = [
    "C {verb} the {noun}",
    "C {verb} a {noun}",
    "#C C {verb} the {noun}",
    "where did i {verb_base} the {noun}",
    "when did i {verb_base} a {noun}",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingAnnotation {
    pub query_id: String,
    pub clip_id: String,
    pub query_text: String,
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
}

impl GroundingAnnotation {
    pub fn gt(&self) -> TemporalSegment {
        TemporalSegment::new(self.start_s, self.end_s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentAnnotation {
    pub clip_id: String,
    pub category_id: usize,
    pub segments: Vec<TemporalSegment>,
    pub duration_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionToken {
    pub verb: usize,
    pub noun: usize,
}

impl ActionToken {
    pub fn action_id(&self, num_nouns: usize) -> usize {
        self.verb * num_nouns + self.noun
    }

    pub fn from_action_id(id: usize, num_nouns: usize) -> Self {
        Self { verb: id / num_nouns, noun: id % num_nouns }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedAction {
    pub clip_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub token: ActionToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnticipationAnnotation {
    pub example_id: String,
    pub video_id: String,
    pub history: Vec<ObservedAction>,
    pub future: Vec<ActionToken>,
}

/// One labelled action interval; the unit for recognition and retrieval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabel {
    pub item_id: String,
    pub clip_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub verb: usize,
    pub noun: usize,
    pub caption: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub nlq: Vec<GroundingAnnotation>,
    pub goalstep: Vec<GroundingAnnotation>,
    /// Narrations-as-queries: the larger auto-generated grounding pretraining set.
    pub naq: Vec<GroundingAnnotation>,
    pub moments: Vec<MomentAnnotation>,
    pub anticipation: Vec<AnticipationAnnotation>,
    pub segments: Vec<SegmentLabel>,
}

impl Annotations {
    pub fn is_empty(&self) -> bool {
        self.nlq.is_empty()
            && self.goalstep.is_empty()
            && self.naq.is_empty()
            && self.moments.is_empty()
            && self.anticipation.is_empty()
            && self.segments.is_empty()
    }
}

pub fn build_annotations(cfg: &WorldConfig, clips: &[Clip]) -> Annotations {
    let mut ann = Annotations::default();
    for clip in clips {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for e in &clip.script.entries {
            *counts.entry((e.verb_id, e.noun_id)).or_default() += 1;
        }
        for (k, e) in clip.script.entries.iter().enumerate() {
            ann.segments.push(SegmentLabel {
                item_id: format!("{}_{k}", clip.id),
                clip_id: clip.id.clone(),
                start_s: e.start_s,
                end_s: e.end_s,
                verb: e.verb_id,
                noun: e.noun_id,
                caption: render_template(&cfg.templates[0], e.verb_id, e.noun_id),
            });
            // a query must pick out exactly one interval
            if counts[&(e.verb_id, e.noun_id)] != 1 {
                continue;
            }
            let grounding = |id: String, template: &str| GroundingAnnotation {
                query_id: id,
                clip_id: clip.id.clone(),
                query_text: render_template(template, e.verb_id, e.noun_id),
                start_s: e.start_s,
                end_s: e.end_s,
                duration_s: clip.duration_s,
            };
            ann.nlq.push(grounding(format!("nlq_{}_{k}", clip.id), NLQ_TEMPLATE));
            ann.goalstep.push(grounding(format!("step_{}_{k}", clip.id), STEP_TEMPLATE));
            for (j, t) in NARRATION_TEMPLATES.iter().enumerate() {
                ann.naq.push(grounding(format!("naq_{}_{k}_{j}", clip.id), t));
            }
        }
        let mut by_verb: Vec<Vec<TemporalSegment>> = vec![Vec::new(); cfg.num_verbs];
        for e in &clip.script.entries {
            by_verb[e.verb_id].push(TemporalSegment::new(e.start_s, e.end_s));
        }
        for (category_id, segments) in by_verb.into_iter().enumerate() {
            if !segments.is_empty() {
                ann.moments.push(MomentAnnotation {
                    clip_id: clip.id.clone(),
                    category_id,
                    segments,
                    duration_s: clip.duration_s,
                });
            }
        }
    }

    let mut videos: Vec<(&str, Vec<ObservedAction>)> = Vec::new();
    for clip in clips {
        if videos.last().is_none_or(|(v, _)| *v != clip.video_id) {
            videos.push((clip.video_id.as_str(), Vec::new()));
        }
        let stream = &mut videos.last_mut().expect("pushed above").1;
        stream.extend(clip.script.entries.iter().map(|e| ObservedAction {
            clip_id: clip.id.clone(),
            start_s: e.start_s,
            end_s: e.end_s,
            token: ActionToken { verb: e.verb_id, noun: e.noun_id },
        }));
    }
    for (video, actions) in videos {
        if actions.len() < HISTORY_LEN + FUTURE_LEN {
            continue;
        }
        for p in (HISTORY_LEN..=actions.len() - FUTURE_LEN).step_by(cfg.lta_stride) {
            ann.anticipation.push(AnticipationAnnotation {
                example_id: format!("{video}_{p:04}"),
                video_id: video.to_string(),
                history: actions[p - HISTORY_LEN..p].to_vec(),
                future: actions[p..p + FUTURE_LEN].iter().map(|a| a.token).collect(),
            });
        }
    }
    ann
}
