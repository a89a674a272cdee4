//! End-to-end post-processing over ingested detections and tubelets.
//!
//! Stage order: tubelet suppression per (video, end frame); per-frame NMS
//! with box voting per (video, class, frame); confidence filter; then, per
//! (video, class), Viterbi linking, tubelet-guided merging and rescoring.
//! Partitions are independent and may run on several threads; results are
//! assembled in key order, so output never depends on scheduling.

mod config;
pub mod records;

pub use config::PipelineConfig;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, GroundTruthBox};
use crate::geometry::{bbox_voting, nms, Detection};
use crate::linking::{build_tubes, filter_by_beta, merge_tubes, rescore_tube, Tube, TubeletIndex};
use crate::tubelets::{tubelet_nms, Tubelet};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Final per-frame detections in canonical order.
    pub detections: Vec<Detection>,
    /// Tubes ordered by video, class, then extraction order.
    pub tubes: Vec<Tube>,
    /// Tubelets that survived suppression.
    pub tubelets: Vec<Tubelet>,
    pub metrics: Option<EvalReport>,
}

/// Total order used for emitted detections: video, frame, class, score
/// descending, then box corners and provenance.
pub fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    a.video
        .cmp(&b.video)
        .then(a.frame.cmp(&b.frame))
        .then(a.class_id.cmp(&b.class_id))
        .then(b.score.total_cmp(&a.score))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.source_proposal_ids.cmp(&b.source_proposal_ids))
}

/// Checks tubelet lengths against the config and runs Tubelet-NMS within
/// each (video, end frame) group, class-agnostically.
pub fn suppress_tubelets(tubelets: &[Tubelet], cfg: &PipelineConfig) -> Result<Vec<Tubelet>> {
    if let Some(bad) = tubelets.iter().find(|t| t.len() != cfg.tubelet_len) {
        return Err(Error::Config(format!(
            "tubelet {} has {} frames but tubelet_len is {}",
            bad.id,
            bad.len(),
            cfg.tubelet_len
        )));
    }
    let mut groups: BTreeMap<(&str, u32), Vec<Tubelet>> = BTreeMap::new();
    for t in tubelets {
        groups
            .entry((&t.video, t.end_frame))
            .or_default()
            .push(t.clone());
    }
    let mut out = Vec::new();
    for group in groups.values() {
        out.extend(tubelet_nms(group, cfg.tnms_threshold())?);
    }
    Ok(out)
}

/// NMS with box voting per (video, class, frame), then the confidence
/// filter. Suppressed detections hand their proposal ids to the keeper.
pub fn refine_detections(dets: &[Detection], cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let mut groups: BTreeMap<(&str, u32, u32), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups
            .entry((&d.video, d.class_id, d.frame))
            .or_default()
            .push(d.clone());
    }
    let mut out = Vec::new();
    for group in groups.values() {
        let kept = nms(group, cfg.final_nms_iou)?;
        let voted = bbox_voting(&kept, group, cfg.voting_iou)?;
        out.extend(filter_by_beta(&voted, cfg.beta));
    }
    out.sort_by(canonical_order);
    Ok(out)
}

struct VideoTubelets {
    tubelets: Vec<Tubelet>,
    index: TubeletIndex,
}

fn link_partition(
    class_id: u32,
    dets: Vec<Detection>,
    support: Option<&VideoTubelets>,
    cfg: &PipelineConfig,
) -> Result<(Vec<Detection>, Vec<Tube>)> {
    let n_in = dets.len();
    let mut per_frame: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        per_frame.entry(d.frame).or_default().push(d);
    }
    let mut tubes = build_tubes(&per_frame, class_id)?;
    if cfg.merge {
        if let Some(s) = support {
            tubes = merge_tubes(&tubes, &s.tubelets, &s.index)?;
        }
    }
    if cfg.rescore {
        tubes = tubes
            .iter()
            .map(|t| rescore_tube(t, cfg.alpha))
            .collect::<Result<_>>()?;
    }
    for t in &tubes {
        t.check()?;
    }
    let out: Vec<Detection> = tubes
        .iter()
        .flat_map(|t| t.entries.iter().cloned())
        .collect();
    if out.len() != n_in {
        return Err(Error::Internal(format!(
            "class {class_id}: {n_in} detections entered linking, {} left",
            out.len()
        )));
    }
    Ok((out, tubes))
}

fn worker_count(cfg: &PipelineConfig, jobs: usize) -> usize {
    let n = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.threads
    };
    n.clamp(1, jobs.max(1))
}

/// Runs the full chain. Ground truth, when given, adds frame-level metrics
/// at the configured IoU thresholds.
pub fn run_pipeline(
    detections: &[Detection],
    tubelets: &[Tubelet],
    ground_truth: Option<&[GroundTruthBox]>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let kept_tubelets = suppress_tubelets(tubelets, cfg)?;
    let refined = refine_detections(detections, cfg)?;

    let (final_dets, tubes) = if cfg.link {
        let mut by_video: BTreeMap<&str, Vec<Tubelet>> = BTreeMap::new();
        for t in &kept_tubelets {
            by_video.entry(&t.video).or_default().push(t.clone());
        }
        let support: BTreeMap<&str, VideoTubelets> = by_video
            .into_iter()
            .map(|(v, tubelets)| {
                let index = TubeletIndex::new(&tubelets);
                (v, VideoTubelets { tubelets, index })
            })
            .collect();

        let mut parts: BTreeMap<(String, u32), Vec<Detection>> = BTreeMap::new();
        for d in refined {
            parts
                .entry((d.video.clone(), d.class_id))
                .or_default()
                .push(d);
        }
        let jobs: Vec<((String, u32), Vec<Detection>)> = parts.into_iter().collect();
        let workers = worker_count(cfg, jobs.len());
        let chunk = jobs.len().div_ceil(workers).max(1);

        let mut results: Vec<Result<(Vec<Detection>, Vec<Tube>)>> = Vec::with_capacity(jobs.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|slice| {
                    let support = &support;
                    scope.spawn(move || {
                        slice
                            .iter()
                            .map(|((video, class), dets)| {
                                link_partition(
                                    *class,
                                    dets.clone(),
                                    support.get(video.as_str()),
                                    cfg,
                                )
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                match h.join() {
                    Ok(r) => results.extend(r),
                    Err(_) => results.push(Err(Error::Internal("linking worker panicked".into()))),
                }
            }
        });

        let mut dets = Vec::new();
        let mut tubes = Vec::new();
        for r in results {
            let (d, t) = r?;
            dets.extend(d);
            tubes.extend(t);
        }
        dets.sort_by(canonical_order);
        (dets, tubes)
    } else {
        (refined, Vec::new())
    };

    let metrics = match ground_truth {
        Some(gt) if !gt.is_empty() => Some(evaluate(&final_dets, gt, &cfg.eval_iou_thresholds)?),
        _ => None,
    };
    Ok(PipelineOutput {
        detections: final_dets,
        tubes,
        tubelets: kept_tubelets,
        metrics,
    })
}
