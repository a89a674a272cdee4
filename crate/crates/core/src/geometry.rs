//! Axis-aligned boxes, per-frame NMS with suppression provenance, and
//! bounding-box voting.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Axis-aligned box in corner form, continuous pixel coordinates.
///
/// Construction validates `x1 <= x2`, `y1 <= y2` and finiteness, so every
/// `BBox` in circulation is well formed. Zero-area boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "non-finite coordinate in [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::InvalidGeometry(format!(
                "negative extent in [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Builds a box from its center `(cx, cy)` and size `(w, h)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidGeometry(format!("negative size w={w} h={h}")));
        }
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// Center form `(cx, cy, w, h)`.
    pub fn to_center(&self) -> (f64, f64, f64, f64) {
        (
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.width(),
            self.height(),
        )
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Same box shifted by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Same box with every coordinate multiplied by `s >= 0`.
    pub fn scale(&self, s: f64) -> BBox {
        debug_assert!(s >= 0.0);
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A scored, class-labelled box at one frame of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video: String,
    pub frame: u32,
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
    /// Proposal identifiers absorbed by suppression and voting. Starts as the
    /// detection's own proposal, if it has one.
    pub source_proposal_ids: BTreeSet<String>,
}

impl Detection {
    pub fn new(
        video: impl Into<String>,
        frame: u32,
        class_id: u32,
        score: f64,
        bbox: BBox,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::precondition(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection {
            video: video.into(),
            frame,
            class_id,
            score,
            bbox,
            source_proposal_ids: BTreeSet::new(),
        })
    }

    pub fn with_proposal(mut self, id: impl Into<String>) -> Self {
        self.source_proposal_ids.insert(id.into());
        self
    }
}

/// One keeper and the input indices it suppressed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuppressionGroup {
    pub keeper: usize,
    pub suppressed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmsOutput {
    /// Surviving detections in descending score order, with the proposal ids
    /// of everything they suppressed merged in.
    pub kept: Vec<Detection>,
    /// `groups[i]` describes `kept[i]`; indices refer to the NMS input slice.
    pub groups: Vec<SuppressionGroup>,
}

/// Descending score, ties by lower index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy NMS over detections that share one video, frame and class.
///
/// A lower-scored detection is suppressed when its IoU with a keeper exceeds
/// `iou_thresh`. Each suppressed detection is recorded under the first keeper
/// (in score order) that suppresses it.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<NmsOutput> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::precondition(format!(
            "iou threshold {iou_thresh} outside [0, 1]"
        )));
    }
    if let Some(first) = dets.first() {
        if let Some(bad) = dets.iter().find(|d| {
            d.frame != first.frame || d.class_id != first.class_id || d.video != first.video
        }) {
            return Err(Error::precondition(format!(
                "nms input mixes (video, frame, class): ({}, {}, {}) vs ({}, {}, {})",
                first.video, first.frame, first.class_id, bad.video, bad.frame, bad.class_id
            )));
        }
    }

    let order = score_order(dets);
    let mut taken = vec![false; dets.len()];
    let mut kept = Vec::new();
    let mut groups = Vec::new();

    for (pos, &i) in order.iter().enumerate() {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        let mut keeper = dets[i].clone();
        let mut suppressed = Vec::new();
        for &j in &order[pos + 1..] {
            if taken[j] {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                taken[j] = true;
                suppressed.push(j);
                keeper
                    .source_proposal_ids
                    .extend(dets[j].source_proposal_ids.iter().cloned());
            }
        }
        kept.push(keeper);
        groups.push(SuppressionGroup {
            keeper: i,
            suppressed,
        });
    }

    Ok(NmsOutput { kept, groups })
}

/// Replaces each kept box by the score-weighted mean of its own corners and
/// those of every suppressed box with IoU >= `voting_iou` against it.
/// Scores and provenance are left unchanged.
pub fn bbox_voting(nms: &NmsOutput, all: &[Detection], voting_iou: f64) -> Result<Vec<Detection>> {
    if nms.kept.len() != nms.groups.len() {
        return Err(Error::precondition("kept and groups differ in length"));
    }
    let mut out = Vec::with_capacity(nms.kept.len());
    for (kept, group) in nms.kept.iter().zip(&nms.groups) {
        let members = std::iter::once(&group.keeper).chain(&group.suppressed);
        if let Some(&bad) = members.clone().find(|&&i| i >= all.len()) {
            return Err(Error::precondition(format!(
                "suppression index {bad} out of range for {} detections",
                all.len()
            )));
        }

        let mut acc = [0.0f64; 4];
        let mut total = 0.0;
        let mut voters = 0;
        for &i in members {
            let d = &all[i];
            if i != group.keeper && iou(&kept.bbox, &d.bbox) < voting_iou {
                continue;
            }
            for (a, c) in acc.iter_mut().zip(d.bbox.to_array()) {
                *a += d.score * c;
            }
            total += d.score;
            voters += 1;
        }

        let mut voted = kept.clone();
        // a lone keeper keeps its box exactly; s * c / s need not round-trip
        if voters > 1 && total > 0.0 {
            voted.bbox = BBox::from_array(acc.map(|a| a / total))?;
        }
        out.push(voted);
    }
    Ok(out)
}
