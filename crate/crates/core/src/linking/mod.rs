//! Long-term object linking.
//!
//! Detections that survive the confidence filter are chained frame to frame
//! by a Viterbi search ([`build_tubes`]); fragments broken by missed or
//! misclassified detections are rejoined when one short-term tubelet covers
//! the end of one fragment and the start of another ([`merge_tubes`]); each
//! final tube is then rescored with the mean of its top scores
//! ([`rescore_tube`]).

mod hungarian;
mod merge;
mod viterbi;

pub use hungarian::{assignment_total, solve_assignment};
pub use merge::{
    gamma, merge_cost_matrix, merge_tubes, merge_tubes_with_edges, MergeEdge, TubeletIndex,
};
pub use viterbi::{build_tubes, chain_link_score};

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};

/// Defaults: `beta = 0.05`, `alpha = 0.10`, final NMS 0.5, voting 0.5, `N = 6`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkingConfig {
    /// Minimum detection confidence admitted to linking.
    pub beta: f64,
    /// Fraction of highest scores averaged when rescoring a tube.
    pub alpha: f64,
    pub nms_iou: f64,
    pub voting_iou: f64,
    pub tubelet_len: usize,
}

impl Default for LinkingConfig {
    fn default() -> Self {
        LinkingConfig {
            beta: 0.05,
            alpha: 0.10,
            nms_iou: 0.5,
            voting_iou: 0.5,
            tubelet_len: 6,
        }
    }
}

impl LinkingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("alpha", self.alpha)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")));
            }
        }
        for (name, v) in [("nms_iou", self.nms_iou), ("voting_iou", self.voting_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if self.tubelet_len == 0 {
            return Err(Error::Config("tubelet length must be at least 1".into()));
        }
        Ok(())
    }
}

/// A class-labelled sequence of detections with strictly increasing frames.
///
/// Tubes straight out of [`build_tubes`] cover consecutive frames; merged
/// tubes may skip frames where a fragment gap was bridged.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub id: String,
    pub video: String,
    pub class_id: u32,
    pub entries: Vec<Detection>,
    /// Scores before rescoring, aligned with `entries`.
    pub original_scores: Vec<f64>,
    /// Mean of the original scores until [`rescore_tube`] replaces it.
    pub final_score: f64,
}

impl Tube {
    /// Builds a tube from detections ordered by frame.
    pub fn from_detections(id: impl Into<String>, entries: Vec<Detection>) -> Result<Tube> {
        let first = entries
            .first()
            .ok_or_else(|| Error::precondition("a tube needs at least one detection"))?;
        let tube = Tube {
            id: id.into(),
            video: first.video.clone(),
            class_id: first.class_id,
            original_scores: entries.iter().map(|d| d.score).collect(),
            final_score: entries.iter().map(|d| d.score).sum::<f64>() / entries.len() as f64,
            entries,
        };
        tube.check()?;
        Ok(tube)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn first(&self) -> &Detection {
        &self.entries[0]
    }

    pub fn last(&self) -> &Detection {
        &self.entries[self.entries.len() - 1]
    }

    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|d| d.frame)
    }

    /// Number of places where consecutive entries skip at least one frame.
    pub fn gap_count(&self) -> usize {
        self.entries
            .windows(2)
            .filter(|w| w[1].frame > w[0].frame + 1)
            .count()
    }

    /// Checks the tube invariants: non-empty, one class and video, frames
    /// strictly increasing, scores aligned.
    pub fn check(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Internal(format!("tube {} is empty", self.id)));
        }
        if self.original_scores.len() != self.entries.len() {
            return Err(Error::Internal(format!(
                "tube {}: {} scores for {} entries",
                self.id,
                self.original_scores.len(),
                self.entries.len()
            )));
        }
        for d in &self.entries {
            if d.class_id != self.class_id || d.video != self.video {
                return Err(Error::Internal(format!(
                    "tube {} mixes classes or videos",
                    self.id
                )));
            }
        }
        if let Some(w) = self.entries.windows(2).find(|w| w[1].frame <= w[0].frame) {
            return Err(Error::Internal(format!(
                "tube {}: frame {} follows frame {}",
                self.id, w[1].frame, w[0].frame
            )));
        }
        Ok(())
    }
}

/// Keeps detections with `score >= beta`, preserving order.
pub fn filter_by_beta(dets: &[Detection], beta: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= beta).cloned().collect()
}

/// `p_a + p_b + IoU(a, b)` for two same-class detections at different frames.
pub fn linking_score(a: &Detection, b: &Detection) -> Result<f64> {
    if a.class_id != b.class_id {
        return Err(Error::precondition(format!(
            "linking classes {} and {}",
            a.class_id, b.class_id
        )));
    }
    if a.frame == b.frame {
        return Err(Error::precondition(format!(
            "linking two detections at frame {}",
            a.frame
        )));
    }
    Ok(pair_score(a, b))
}

#[inline]
pub(crate) fn pair_score(a: &Detection, b: &Detection) -> f64 {
    a.score + b.score + iou(&a.bbox, &b.bbox)
}

/// Number of top scores averaged for a tube of `m` entries.
pub fn top_k(alpha: f64, m: usize) -> usize {
    // the epsilon keeps e.g. 0.1 * 30 = 3.0000000000000004 from rounding up to 4
    let k = (alpha * m as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(m)
}

/// Sets every entry's score (and `final_score`) to the mean of the
/// `max(1, ceil(alpha * m))` highest original scores.
pub fn rescore_tube(t: &Tube, alpha: f64) -> Result<Tube> {
    if t.entries.is_empty() {
        return Err(Error::precondition(format!(
            "cannot rescore empty tube {}",
            t.id
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::precondition(format!(
            "alpha = {alpha} outside (0, 1]"
        )));
    }
    let mut sorted = t.original_scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = top_k(alpha, sorted.len());
    let top = &sorted[..k];
    let mean = (top.iter().sum::<f64>() / k as f64).clamp(top[k - 1], top[0]);

    let mut out = t.clone();
    for d in &mut out.entries {
        d.score = mean;
    }
    out.final_score = mean;
    Ok(out)
}
