//! Anchor cuboids, tubelet scoring and overlap, Tubelet-NMS, and pyramid
//! level assignment.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// A short sequence of per-frame box proposals for one object.
///
/// A tubelet of length `N` ending at frame `t` covers frames `t-N+1 ..= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tubelet {
    pub id: String,
    pub video: String,
    pub end_frame: u32,
    pub boxes: Vec<BBox>,
    pub box_scores: Vec<f64>,
    pub box_ids: Vec<String>,
}

impl Tubelet {
    pub fn new(
        id: impl Into<String>,
        video: impl Into<String>,
        end_frame: u32,
        boxes: Vec<BBox>,
        box_scores: Vec<f64>,
        box_ids: Vec<String>,
    ) -> Result<Self> {
        let t = Tubelet {
            id: id.into(),
            video: video.into(),
            end_frame,
            boxes,
            box_scores,
            box_ids,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if n == 0 {
            return Err(Error::precondition(format!("tubelet {} is empty", self.id)));
        }
        if self.box_scores.len() != n || self.box_ids.len() != n {
            return Err(Error::precondition(format!(
                "tubelet {}: {} boxes, {} scores, {} ids",
                self.id,
                n,
                self.box_scores.len(),
                self.box_ids.len()
            )));
        }
        if (self.end_frame as usize) + 1 < n {
            return Err(Error::precondition(format!(
                "tubelet {} of length {n} cannot end at frame {}",
                self.id, self.end_frame
            )));
        }
        if let Some(s) = self.box_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::precondition(format!(
                "tubelet {} has box score {s} outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn start_frame(&self) -> u32 {
        self.end_frame + 1 - self.boxes.len() as u32
    }

    /// Frame index of the `k`-th box.
    pub fn frame_of(&self, k: usize) -> u32 {
        self.start_frame() + k as u32
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<u32> {
        self.start_frame()..=self.end_frame
    }
}

/// Anchor layout for one feature level: `grid_w * grid_h` cells, each with
/// one anchor per (scale, ratio) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    pub stride: f64,
    /// Square-root anchor area in pixels.
    pub scales: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            grid_w: 1,
            grid_h: 1,
            stride: 16.0,
            scales: vec![128.0, 256.0, 512.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 || self.anchors_per_cell() == 0 {
            return Err(Error::precondition(format!(
                "anchor grid {}x{} with {} anchors per cell",
                self.grid_w,
                self.grid_h,
                self.anchors_per_cell()
            )));
        }
        let bad = |v: f64| v.is_nan() || v <= 0.0;
        if bad(self.stride) || self.scales.iter().chain(&self.ratios).any(|&v| bad(v)) {
            return Err(Error::precondition(
                "stride, scales and ratios must be strictly positive",
            ));
        }
        Ok(())
    }
}

/// Generates `W * H * k` anchor cuboids, each a stack of `num_frames`
/// identical anchor boxes ending at `end_frame`. Box scores start at zero.
pub fn generate_anchor_cuboids(
    spec: &AnchorSpec,
    num_frames: usize,
    end_frame: u32,
) -> Result<Vec<Tubelet>> {
    spec.validate()?;
    if num_frames == 0 {
        return Err(Error::precondition(
            "anchor cuboids need at least one frame",
        ));
    }
    if (end_frame as usize) + 1 < num_frames {
        return Err(Error::precondition(format!(
            "a {num_frames}-frame cuboid cannot end at frame {end_frame}"
        )));
    }

    let mut out = Vec::with_capacity(spec.grid_w * spec.grid_h * spec.anchors_per_cell());
    for j in 0..spec.grid_h {
        for i in 0..spec.grid_w {
            let cx = spec.stride * (i as f64 + 0.5);
            let cy = spec.stride * (j as f64 + 0.5);
            for (si, &scale) in spec.scales.iter().enumerate() {
                for (ri, &ratio) in spec.ratios.iter().enumerate() {
                    let w = scale / ratio.sqrt();
                    let h = scale * ratio.sqrt();
                    let b = BBox::from_center(cx, cy, w, h)?;
                    let id = format!("anchor/{j}/{i}/{si}/{ri}");
                    let box_ids = (0..num_frames)
                        .map(|k| format!("{id}@{}", end_frame as usize + 1 - num_frames + k))
                        .collect();
                    out.push(Tubelet {
                        id,
                        video: String::new(),
                        end_frame,
                        boxes: vec![b; num_frames],
                        box_scores: vec![0.0; num_frames],
                        box_ids,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Mean of the per-box scores.
pub fn tubelet_score(t: &Tubelet) -> Result<f64> {
    if t.box_scores.is_empty() {
        return Err(Error::precondition(format!(
            "tubelet {} has no scores",
            t.id
        )));
    }
    Ok(t.box_scores.iter().sum::<f64>() / t.box_scores.len() as f64)
}

/// Mean per-frame IoU between two tubelets covering the same frames.
pub fn tubelet_overlap(a: &Tubelet, b: &Tubelet) -> Result<f64> {
    if a.len() != b.len() || a.end_frame != b.end_frame {
        return Err(Error::precondition(format!(
            "tubelets {} ({} frames ending {}) and {} ({} frames ending {}) are not aligned",
            a.id,
            a.len(),
            a.end_frame,
            b.id,
            b.len(),
            b.end_frame
        )));
    }
    if a.is_empty() {
        return Err(Error::precondition("empty tubelets"));
    }
    let total: f64 = a.boxes.iter().zip(&b.boxes).map(|(x, y)| iou(x, y)).sum();
    Ok(total / a.len() as f64)
}

/// Greedy Tubelet-NMS over a set sharing one frame range.
///
/// Candidates are visited in descending [`tubelet_score`] order (ties by
/// lower id); a tubelet is dropped when its [`tubelet_overlap`] with an
/// already kept one exceeds `overlap_thresh`. Survivors are returned in
/// visiting order.
pub fn tubelet_nms(ts: &[Tubelet], overlap_thresh: f64) -> Result<Vec<Tubelet>> {
    Ok(tubelet_nms_indices(ts, overlap_thresh)?
        .into_iter()
        .map(|i| ts[i].clone())
        .collect())
}

/// Index form of [`tubelet_nms`].
pub fn tubelet_nms_indices(ts: &[Tubelet], overlap_thresh: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&overlap_thresh) {
        return Err(Error::precondition(format!(
            "overlap threshold {overlap_thresh} outside [0, 1]"
        )));
    }
    if let Some(first) = ts.first() {
        if let Some(bad) = ts
            .iter()
            .find(|t| t.len() != first.len() || t.end_frame != first.end_frame)
        {
            return Err(Error::precondition(format!(
                "tubelet-nms input mixes frame ranges: {} vs {}",
                first.id, bad.id
            )));
        }
    }

    let scores = ts.iter().map(tubelet_score).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ts[a].id.cmp(&ts[b].id))
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut redundant = false;
        for &k in &kept {
            if tubelet_overlap(&ts[k], &ts[i])? > overlap_thresh {
                redundant = true;
                break;
            }
        }
        if !redundant {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Parameters of the FPN level heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelAssignment {
    pub k0: i32,
    pub canonical_size: f64,
    pub min_level: i32,
    pub max_level: i32,
}

impl Default for LevelAssignment {
    fn default() -> Self {
        LevelAssignment {
            k0: 4,
            canonical_size: 224.0,
            min_level: 2,
            max_level: 5,
        }
    }
}

/// `k0 + log2(sqrt(area) / canonical_size)` before flooring and clamping.
/// Negative infinity for zero-area boxes.
pub fn unclamped_pyramid_level(b: &BBox, k0: i32, canonical_size: f64) -> f64 {
    f64::from(k0) + (b.area().sqrt() / canonical_size).log2()
}

pub fn assign_pyramid_level(
    b: &BBox,
    k0: i32,
    canonical_size: f64,
    min_level: i32,
    max_level: i32,
) -> i32 {
    if b.area() <= 0.0 {
        return min_level;
    }
    let level = unclamped_pyramid_level(b, k0, canonical_size).floor();
    (level.max(f64::from(min_level)).min(f64::from(max_level))) as i32
}

impl LevelAssignment {
    pub fn level_of(&self, b: &BBox) -> i32 {
        assign_pyramid_level(
            b,
            self.k0,
            self.canonical_size,
            self.min_level,
            self.max_level,
        )
    }
}
