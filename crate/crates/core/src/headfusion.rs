//! Double-head score fusion and cascade-stage averaging.

use crate::error::{Error, Result};

/// Per-class probabilities, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::precondition(format!("score {bad} outside [0, 1]")));
        }
        Ok(ScoreVector(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Elementwise `p_tmp + p_spt * (1 - p_tmp)`.
///
/// The larger of the two entries is placed in the `p_tmp` slot, so the result
/// is bitwise symmetric and never below either input.
pub fn fuse(p_spt: f64, p_tmp: f64) -> f64 {
    let (hi, lo) = if p_tmp >= p_spt {
        (p_tmp, p_spt)
    } else {
        (p_spt, p_tmp)
    };
    hi + lo * (1.0 - hi)
}

pub fn fuse_scores(p_spt: &ScoreVector, p_tmp: &ScoreVector) -> Result<ScoreVector> {
    if p_spt.len() != p_tmp.len() {
        return Err(Error::precondition(format!(
            "spatial scores have {} classes, temporal {}",
            p_spt.len(),
            p_tmp.len()
        )));
    }
    Ok(ScoreVector(
        p_spt
            .0
            .iter()
            .zip(&p_tmp.0)
            .map(|(&s, &t)| fuse(s, t))
            .collect(),
    ))
}

/// Elementwise mean over cascade stages.
pub fn cascade_average(stages: &[ScoreVector]) -> Result<ScoreVector> {
    let first = stages
        .first()
        .ok_or_else(|| Error::precondition("cascade average of zero stages"))?;
    if let Some(bad) = stages.iter().find(|s| s.len() != first.len()) {
        return Err(Error::precondition(format!(
            "stage lengths {} and {} differ",
            first.len(),
            bad.len()
        )));
    }
    let n = stages.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for s in stages {
        for (a, v) in acc.iter_mut().zip(&s.0) {
            *a += v;
        }
    }
    Ok(ScoreVector(
        acc.into_iter().map(|a| (a / n).min(1.0)).collect(),
    ))
}

/// Whether spatial cascade stages are averaged before or after fusion with
/// the temporal head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    #[default]
    AverageThenFuse,
    FuseThenAverage,
}

/// Final classification from cascade spatial stages plus the temporal head.
pub fn combine_heads(
    spatial_stages: &[ScoreVector],
    temporal: &ScoreVector,
    order: FusionOrder,
) -> Result<ScoreVector> {
    match order {
        FusionOrder::AverageThenFuse => fuse_scores(&cascade_average(spatial_stages)?, temporal),
        FusionOrder::FuseThenAverage => {
            let fused = spatial_stages
                .iter()
                .map(|s| fuse_scores(s, temporal))
                .collect::<Result<Vec<_>>>()?;
            cascade_average(&fused)
        }
    }
}
