use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A time interval in seconds, optionally scored and labelled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSegment {
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl TemporalSegment {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s, score: None, label: None }
    }

    pub fn scored(start_s: f64, end_s: f64, score: f64) -> Self {
        Self { start_s, end_s, score: Some(score), label: None }
    }

    /// Rejects `start > end`, negative starts and non-finite bounds.
    pub fn validate(&self) -> Result<()> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) || self.start_s < 0.0 || self.start_s > self.end_s {
            return Err(Error::InvalidSegment { start: self.start_s, end: self.end_s });
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }
}
