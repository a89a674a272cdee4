use std::collections::BTreeMap;

use super::{pair_score, Tube};
use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};

/// Accumulated linking score of a frame-consecutive chain, summed front to
/// back starting from zero. A single detection scores zero.
pub fn chain_link_score(chain: &[Detection]) -> f64 {
    chain
        .windows(2)
        .fold(0.0, |acc, w| acc + pair_score(&w[0], &w[1]))
}

struct Candidate {
    /// Position in the flattened input, used for tie-breaking.
    index: usize,
    det: Detection,
}

/// Iterative Viterbi tube extraction for one class of one video.
///
/// Ending frames are visited from the last frame backwards. While the current
/// ending frame still has unassigned detections, the chain ending there with
/// the highest accumulated [`linking_score`](super::linking_score) is
/// extracted and its detections are removed. A chain extends backwards as
/// long as the previous frame still has detections. Leftovers at the first
/// frame become single-detection tubes.
pub fn build_tubes(per_frame: &BTreeMap<u32, Vec<Detection>>, class_id: u32) -> Result<Vec<Tube>> {
    let mut remaining: BTreeMap<u32, Vec<Candidate>> = BTreeMap::new();
    let mut video: Option<&str> = None;
    let mut index = 0;
    for (&frame, dets) in per_frame {
        for d in dets {
            if d.class_id != class_id || d.frame != frame {
                return Err(Error::precondition(format!(
                    "detection (frame {}, class {}) filed under frame {frame}, class {class_id}",
                    d.frame, d.class_id
                )));
            }
            match video {
                None => video = Some(&d.video),
                Some(v) if v != d.video => {
                    return Err(Error::precondition(format!(
                        "build_tubes mixes videos {v} and {}",
                        d.video
                    )))
                }
                _ => {}
            }
            remaining.entry(frame).or_default().push(Candidate {
                index,
                det: d.clone(),
            });
            index += 1;
        }
    }
    let Some(video) = video.map(str::to_owned) else {
        return Ok(Vec::new());
    };
    let (&first_frame, _) = remaining.first_key_value().unwrap();
    let (&last_frame, _) = remaining.last_key_value().unwrap();

    let mut tubes = Vec::new();
    for end in (first_frame..=last_frame).rev() {
        while remaining.get(&end).is_some_and(|v| !v.is_empty()) {
            let chain = best_chain_ending_at(&remaining, end);
            let mut entries = Vec::with_capacity(chain.len());
            for (frame, pos) in chain {
                let slot = remaining.get_mut(&frame).unwrap();
                entries.push(slot.remove(pos).det);
            }
            entries.reverse();
            let id = format!("{video}/c{class_id}/{}", tubes.len());
            tubes.push(Tube::from_detections(id, entries)?);
        }
    }
    Ok(tubes)
}

/// Returns `(frame, position)` pairs from the end frame backwards. Positions
/// are valid for sequential removal because each frame appears once.
fn best_chain_ending_at(remaining: &BTreeMap<u32, Vec<Candidate>>, end: u32) -> Vec<(u32, usize)> {
    let nonempty = |f: u32| remaining.get(&f).is_some_and(|v| !v.is_empty());
    let mut start = end;
    while start > 0 && nonempty(start - 1) {
        start -= 1;
    }

    // best[f - start][k], back[f - start][k] = predecessor position at f - 1
    let mut best: Vec<Vec<f64>> = Vec::with_capacity((end - start + 1) as usize);
    let mut back: Vec<Vec<usize>> = Vec::with_capacity((end - start + 1) as usize);
    best.push(vec![0.0; remaining[&start].len()]);
    back.push(vec![usize::MAX; remaining[&start].len()]);

    for frame in start + 1..=end {
        let prev = &remaining[&(frame - 1)];
        let prev_best = best.last().unwrap();
        let cur = &remaining[&frame];
        let mut row_best = Vec::with_capacity(cur.len());
        let mut row_back = Vec::with_capacity(cur.len());
        for c in cur {
            let mut arg = 0;
            let mut arg_val = prev_best[0] + pair_score(&prev[0].det, &c.det);
            let mut arg_iou = iou(&prev[0].det.bbox, &c.det.bbox);
            for (p, cand) in prev.iter().enumerate().skip(1) {
                let v = prev_best[p] + pair_score(&cand.det, &c.det);
                let o = iou(&cand.det.bbox, &c.det.bbox);
                let better = v > arg_val
                    || (v == arg_val
                        && (o > arg_iou || (o == arg_iou && cand.index < prev[arg].index)));
                if better {
                    arg = p;
                    arg_val = v;
                    arg_iou = o;
                }
            }
            row_best.push(arg_val);
            row_back.push(arg);
        }
        best.push(row_best);
        back.push(row_back);
    }

    let last = best.last().unwrap();
    let ends = &remaining[&end];
    let mut pos = 0;
    for k in 1..ends.len() {
        if last[k] > last[pos] || (last[k] == last[pos] && ends[k].index < ends[pos].index) {
            pos = k;
        }
    }

    let mut chain = Vec::with_capacity(best.len());
    let mut frame = end;
    loop {
        chain.push((frame, pos));
        if frame == start {
            break;
        }
        pos = back[(frame - start) as usize][pos];
        frame -= 1;
    }
    chain
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn det(frame: u32, score: f64, b: [f64; 4]) -> Detection {
        Detection::new("v", frame, 0, score, BBox::from_array(b).unwrap()).unwrap()
    }

    fn by_frame(dets: Vec<Detection>) -> BTreeMap<u32, Vec<Detection>> {
        let mut m: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
        for d in dets {
            m.entry(d.frame).or_default().push(d);
        }
        m
    }

    #[test]
    fn empty_input() {
        assert!(build_tubes(&BTreeMap::new(), 0).unwrap().is_empty());
    }

    #[test]
    fn single_overlapping_track() {
        let dets = (1..=3)
            .map(|f| det(f, 0.8, [0.0, 0.0, 10.0, 10.0]))
            .collect();
        let tubes = build_tubes(&by_frame(dets), 0).unwrap();
        assert_eq!(tubes.len(), 1);
        assert_eq!(tubes[0].frames().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn two_separate_tracks() {
        let mut dets = Vec::new();
        for f in 1..=4 {
            dets.push(det(f, 0.7, [100.0, 100.0, 120.0, 120.0]));
            dets.push(det(f, 0.9, [0.0, 0.0, 10.0, 10.0]));
        }
        let tubes = build_tubes(&by_frame(dets), 0).unwrap();
        assert_eq!(tubes.len(), 2);
        for t in &tubes {
            assert_eq!(t.len(), 4);
            assert!(t.entries.iter().all(|d| d.bbox == t.entries[0].bbox));
        }
        assert_eq!(tubes[0].entries[0].score, 0.9);
    }

    #[test]
    fn first_frame_only_detection() {
        let tubes = build_tubes(&by_frame(vec![det(1, 0.4, [0.0, 0.0, 1.0, 1.0])]), 0).unwrap();
        assert_eq!(tubes.len(), 1);
        assert_eq!(tubes[0].len(), 1);
    }

    #[test]
    fn chain_stops_at_empty_frame() {
        let dets = vec![
            det(1, 0.9, [0.0, 0.0, 10.0, 10.0]),
            det(3, 0.9, [0.0, 0.0, 10.0, 10.0]),
            det(4, 0.9, [0.0, 0.0, 10.0, 10.0]),
        ];
        let tubes = build_tubes(&by_frame(dets), 0).unwrap();
        let frames: Vec<Vec<u32>> = tubes.iter().map(|t| t.frames().collect()).collect();
        assert_eq!(frames, vec![vec![3, 4], vec![1]]);
    }

    #[test]
    fn rejects_wrong_class() {
        let mut d = det(1, 0.5, [0.0, 0.0, 1.0, 1.0]);
        d.class_id = 9;
        assert!(matches!(
            build_tubes(&by_frame(vec![d]), 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn chain_score_folds_front_to_back() {
        let c = vec![
            det(1, 0.5, [0.0, 0.0, 10.0, 10.0]),
            det(2, 0.5, [0.0, 0.0, 10.0, 10.0]),
            det(3, 0.25, [0.0, 0.0, 10.0, 10.0]),
        ];
        assert_eq!(chain_link_score(&c), 2.0 + 1.75);
        assert_eq!(chain_link_score(&c[..1]), 0.0);
    }
}
