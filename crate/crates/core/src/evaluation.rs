//! Frame-level detection matching and average precision.
//!
//! AP uses all-point interpolation: the area under the precision-recall curve
//! after replacing each precision by the maximum precision at any higher
//! recall.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub video: String,
    pub frame: u32,
    pub class_id: u32,
    pub bbox: BBox,
    pub track_id: String,
}

/// COCO-style IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Labels each detection true or false positive.
///
/// Detections are visited in descending score order (ties by input index);
/// each one takes the unmatched ground truth of the same video and frame with
/// the highest IoU, provided it reaches `iou_thresh` (ties by ground-truth
/// index). Returns the visiting order and the label of each visited
/// detection. Callers pass a single class.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
) -> (Vec<usize>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut by_frame: BTreeMap<(&str, u32), Vec<usize>> = BTreeMap::new();
    for (g, gt) in gts.iter().enumerate() {
        by_frame
            .entry((gt.video.as_str(), gt.frame))
            .or_default()
            .push(g);
    }

    let mut used = vec![false; gts.len()];
    let labels = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let Some(cands) = by_frame.get(&(d.video.as_str(), d.frame)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for &g in cands {
                if used[g] {
                    continue;
                }
                let o = iou(&d.bbox, &gts[g].bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (order, labels)
}

/// All-point interpolated AP from labels in descending score order.
pub fn average_precision(labels: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    for (k, &hit) in labels.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap.clamp(0.0, 1.0)
}

/// Unweighted mean of per-class APs.
pub fn mean_ap(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::precondition("mean AP over zero classes"));
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

/// AP of one class at one IoU threshold.
pub fn class_ap(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> f64 {
    let (_, labels) = match_detections(dets, gts, iou_thresh);
    average_precision(&labels, gts.len())
}

/// AP of one class averaged over several IoU thresholds.
pub fn ap_range(dets: &[Detection], gts: &[GroundTruthBox], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::precondition("AP range over zero thresholds"));
    }
    let aps: Vec<f64> = thresholds.iter().map(|&t| class_ap(dets, gts, t)).collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// class -> AP averaged over `iou_thresholds`
    pub per_class: BTreeMap<u32, f64>,
    pub map: f64,
}

/// Per-class AP and mAP over the classes present in the ground truth.
/// Detections of classes without ground truth are ignored.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    thresholds: &[f64],
) -> Result<EvalReport> {
    let classes: BTreeSet<u32> = gts.iter().map(|g| g.class_id).collect();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
        let cg: Vec<GroundTruthBox> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        per_class.insert(c, ap_range(&cd, &cg, thresholds)?);
    }
    let aps: Vec<f64> = per_class.values().copied().collect();
    Ok(EvalReport {
        iou_thresholds: thresholds.to_vec(),
        map: mean_ap(&aps)?,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(frame: u32, b: BBox) -> GroundTruthBox {
        GroundTruthBox {
            video: "v".into(),
            frame,
            class_id: 0,
            bbox: b,
            track_id: "t".into(),
        }
    }

    fn det(frame: u32, score: f64, b: BBox) -> Detection {
        Detection::new("v", frame, 0, score, b).unwrap()
    }

    #[test]
    fn exact_hit_is_tp() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let (_, l) = match_detections(&[det(0, 0.5, b)], &[gt(0, b)], 0.5);
        assert_eq!(l, vec![true]);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let (order, l) = match_detections(&[det(0, 0.3, b), det(0, 0.8, b)], &[gt(0, b)], 0.5);
        assert_eq!(order, vec![1, 0]);
        assert_eq!(l, vec![true, false]);
    }

    #[test]
    fn low_iou_is_fp() {
        // IoU([0,0,10,10], [0,0,4,10]) = 0.4
        let (_, l) = match_detections(
            &[det(0, 0.9, bx(0.0, 0.0, 4.0, 10.0))],
            &[gt(0, bx(0.0, 0.0, 10.0, 10.0))],
            0.5,
        );
        assert_eq!(l, vec![false]);
    }

    #[test]
    fn frames_do_not_cross_match() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let (_, l) = match_detections(&[det(1, 0.9, b)], &[gt(0, b)], 0.5);
        assert_eq!(l, vec![false]);
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert_eq!(average_precision(&[false], 0), 0.0);
    }

    #[test]
    fn map_fixtures() {
        assert_eq!(mean_ap(&[0.4]).unwrap(), 0.4);
        assert_eq!(mean_ap(&[0.2, 0.8]).unwrap(), 0.5);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn perfect_detections_over_range() {
        let gts: Vec<_> = (0..5)
            .map(|f| gt(f, bx(f as f64, 0.0, f as f64 + 8.0, 8.0)))
            .collect();
        let dets: Vec<_> = gts.iter().map(|g| det(g.frame, 0.9, g.bbox)).collect();
        assert_eq!(ap_range(&dets, &gts, &coco_thresholds()).unwrap(), 1.0);
        let report = evaluate(&dets, &gts, &coco_thresholds()).unwrap();
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }

    /// Detections as (frame, score numerator, x, y); ground truths as (frame, x, y).
    type Case = (Vec<(u32, u32, f64, f64)>, Vec<(u32, f64, f64)>);

    /// Ground truths sit on a 25-pixel grid so no detection can reach IoU 0.5
    /// with two of them.
    fn arb_case() -> impl Strategy<Value = Case> {
        (
            prop::collection::vec((0u32..4, 0u32..1024, 0.0..60.0f64, 0.0..60.0f64), 0..25),
            prop::collection::btree_set((0u32..4, 0u32..3, 0u32..3), 1..10).prop_map(|cells| {
                cells
                    .into_iter()
                    .map(|(f, gx, gy)| (f, f64::from(gx) * 25.0, f64::from(gy) * 25.0))
                    .collect()
            }),
        )
    }

    fn build(case: &Case, rescale: impl Fn(f64) -> f64) -> (Vec<Detection>, Vec<GroundTruthBox>) {
        let dets = case
            .0
            .iter()
            .map(|&(f, s, x, y)| {
                det(
                    f,
                    rescale(f64::from(s) / 1024.0),
                    bx(x, y, x + 10.0, y + 10.0),
                )
            })
            .collect();
        let gts = case
            .1
            .iter()
            .map(|&(f, x, y)| gt(f, bx(x, y, x + 10.0, y + 10.0)))
            .collect();
        (dets, gts)
    }

    proptest! {
        #[test]
        fn ap_rank_only(case in arb_case()) {
            let (d, g) = build(&case, |s| s);
            let (d2, _) = build(&case, |s| s * s);
            let (d3, _) = build(&case, |s| 0.5 * s + 0.25);
            let ap = class_ap(&d, &g, 0.5);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert_eq!(ap, class_ap(&d2, &g, 0.5));
            prop_assert_eq!(ap, class_ap(&d3, &g, 0.5));
        }

        #[test]
        fn duplicate_of_matched_never_helps(case in arb_case()) {
            let (mut d, g) = build(&case, |s| s);
            let ap = class_ap(&d, &g, 0.5);
            let (order, labels) = match_detections(&d, &g, 0.5);
            if let Some(k) = labels.iter().position(|&l| l) {
                let mut dup = d[order[k]].clone();
                dup.score = (dup.score * 0.5).min(1.0);
                d.push(dup);
                prop_assert!(class_ap(&d, &g, 0.5) <= ap);
            }
        }
    }
}
