//! JSON Lines record types and their conversion to domain types.
//!
//! Each record keeps fields it does not recognise in `extra`, so ingesting
//! and re-emitting a file preserves them.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evaluation::GroundTruthBox;
use crate::geometry::{BBox, Detection};
use crate::headfusion::{combine_heads, FusionOrder, ScoreVector};
use crate::linking::Tube;
use crate::tubelets::Tubelet;

/// Per-head class probabilities behind a detection's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadScores {
    /// One score per cascade stage of the spatial head.
    pub spatial: Vec<f64>,
    pub temporal: f64,
}

impl HeadScores {
    pub fn fused(&self, order: FusionOrder) -> Result<f64> {
        let stages = self
            .spatial
            .iter()
            .map(|&s| ScoreVector::new(vec![s]))
            .collect::<Result<Vec<_>>>()?;
        let t = ScoreVector::new(vec![self.temporal])?;
        Ok(combine_heads(&stages, &t, order)?.as_slice()[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video: String,
    pub frame: u32,
    pub class: u32,
    pub score: f64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<String>,
    /// Proposal ids absorbed during suppression; written on pipeline output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadScores>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl DetectionRecord {
    /// Converts to a detection. With `fusion` set, a record carrying head
    /// scores takes the fused value as its score.
    pub fn to_detection(&self, fusion: Option<FusionOrder>) -> Result<Detection> {
        let score = match (&self.heads, fusion) {
            (Some(h), Some(order)) => h.fused(order)?,
            _ => self.score,
        };
        let mut d = Detection::new(
            self.video.clone(),
            self.frame,
            self.class,
            score,
            BBox::from_array(self.bbox)?,
        )?;
        d.source_proposal_ids.extend(self.proposal.iter().cloned());
        d.source_proposal_ids
            .extend(self.proposals.iter().flatten().cloned());
        Ok(d)
    }

    /// Output form: a single proposal goes in `proposal`, several in
    /// `proposals`.
    pub fn from_detection(d: &Detection) -> Self {
        let ids: Vec<String> = d.source_proposal_ids.iter().cloned().collect();
        let (proposal, proposals) = match ids.len() {
            0 => (None, None),
            1 => (Some(ids[0].clone()), None),
            _ => (None, Some(ids)),
        };
        DetectionRecord {
            video: d.video.clone(),
            frame: d.frame,
            class: d.class_id,
            score: d.score,
            bbox: d.bbox.to_array(),
            proposal,
            proposals,
            heads: None,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeletRecord {
    pub video: String,
    pub id: String,
    pub end_frame: u32,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub box_ids: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TubeletRecord {
    pub fn to_tubelet(&self) -> Result<Tubelet> {
        Tubelet::new(
            self.id.clone(),
            self.video.clone(),
            self.end_frame,
            self.boxes
                .iter()
                .map(|&b| BBox::from_array(b))
                .collect::<Result<_>>()?,
            self.scores.clone(),
            self.box_ids.clone(),
        )
    }

    pub fn from_tubelet(t: &Tubelet) -> Self {
        TubeletRecord {
            video: t.video.clone(),
            id: t.id.clone(),
            end_frame: t.end_frame,
            boxes: t.boxes.iter().map(BBox::to_array).collect(),
            scores: t.box_scores.clone(),
            box_ids: t.box_ids.clone(),
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeRecord {
    pub video: String,
    pub id: String,
    pub class: u32,
    pub frames: Vec<u32>,
    pub boxes: Vec<[f64; 4]>,
    pub orig_scores: Vec<f64>,
    pub final_score: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TubeRecord {
    pub fn from_tube(t: &Tube) -> Self {
        TubeRecord {
            video: t.video.clone(),
            id: t.id.clone(),
            class: t.class_id,
            frames: t.frames().collect(),
            boxes: t.entries.iter().map(|d| d.bbox.to_array()).collect(),
            orig_scores: t.original_scores.clone(),
            final_score: t.final_score,
            extra: Map::new(),
        }
    }

    /// Rebuilds a tube; every entry carries `final_score` and no provenance.
    pub fn to_tube(&self) -> Result<Tube> {
        if self.frames.len() != self.boxes.len() || self.frames.len() != self.orig_scores.len() {
            return Err(Error::precondition(format!(
                "tube {}: {} frames, {} boxes, {} scores",
                self.id,
                self.frames.len(),
                self.boxes.len(),
                self.orig_scores.len()
            )));
        }
        let entries = self
            .frames
            .iter()
            .zip(&self.boxes)
            .map(|(&f, &b)| {
                Detection::new(
                    self.video.clone(),
                    f,
                    self.class,
                    self.final_score,
                    BBox::from_array(b)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = Tube::from_detections(self.id.clone(), entries)?;
        t.original_scores = self.orig_scores.clone();
        t.final_score = self.final_score;
        t.check()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub video: String,
    pub frame: u32,
    pub class: u32,
    pub bbox: [f64; 4],
    pub track: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl GroundTruthRecord {
    pub fn to_ground_truth(&self) -> Result<GroundTruthBox> {
        Ok(GroundTruthBox {
            video: self.video.clone(),
            frame: self.frame,
            class_id: self.class,
            bbox: BBox::from_array(self.bbox)?,
            track_id: self.track.clone(),
        })
    }

    pub fn from_ground_truth(g: &GroundTruthBox) -> Self {
        GroundTruthRecord {
            video: g.video.clone(),
            frame: g.frame,
            class: g.class_id,
            bbox: g.bbox.to_array(),
            track: g.track_id.clone(),
            extra: Map::new(),
        }
    }
}

/// Parses JSON Lines text. Blank lines are skipped; line numbers are 1-based
/// and `file` only labels errors.
pub fn parse_jsonl<T: DeserializeOwned>(
    text: impl BufRead,
    file: &Path,
) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            file: file.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push((k + 1, rec));
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Ingest {
        file: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_jsonl(BufReader::new(f), path)
}

/// Reads records and converts each one, reporting conversion failures at the
/// offending line.
pub fn read_converted<T: DeserializeOwned, U>(
    path: &Path,
    convert: impl Fn(&T) -> Result<U>,
) -> Result<Vec<U>> {
    read_jsonl(path)?
        .into_iter()
        .map(|(line, rec)| {
            convert(&rec).map_err(|e| Error::Ingest {
                file: path.to_path_buf(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl_string<T: Serialize>(records: &[T]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}
