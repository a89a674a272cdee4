use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headfusion::FusionOrder;
use crate::linking::LinkingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Frames per tubelet; every ingested tubelet must have this length.
    pub tubelet_len: usize,
    pub beta: f64,
    pub alpha: f64,
    pub rpn_nms_iou: f64,
    /// Tubelet suppression threshold; falls back to `rpn_nms_iou`.
    pub tnms_iou: Option<f64>,
    pub final_nms_iou: f64,
    pub voting_iou: f64,
    pub fusion_order: FusionOrder,
    /// Apply head fusion to detections that carry per-head scores.
    pub fuse_heads: bool,
    pub eval_iou_thresholds: Vec<f64>,
    pub seed: u64,
    pub link: bool,
    pub merge: bool,
    pub rescore: bool,
    /// Worker threads across (video, class) partitions; 0 picks one per core.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tubelet_len: 6,
            beta: 0.05,
            alpha: 0.10,
            rpn_nms_iou: 0.7,
            tnms_iou: None,
            final_nms_iou: 0.5,
            voting_iou: 0.5,
            fusion_order: FusionOrder::default(),
            fuse_heads: true,
            eval_iou_thresholds: vec![0.5],
            seed: 0,
            link: true,
            merge: true,
            rescore: true,
            threads: 1,
        }
    }
}

impl PipelineConfig {
    pub fn tnms_threshold(&self) -> f64 {
        self.tnms_iou.unwrap_or(self.rpn_nms_iou)
    }

    pub fn linking(&self) -> LinkingConfig {
        LinkingConfig {
            beta: self.beta,
            alpha: self.alpha,
            nms_iou: self.final_nms_iou,
            voting_iou: self.voting_iou,
            tubelet_len: self.tubelet_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.linking().validate()?;
        for (name, v) in [
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("tnms_iou", self.tnms_threshold()),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if self.eval_iou_thresholds.is_empty() {
            return Err(Error::Config("eval_iou_thresholds is empty".into()));
        }
        if let Some(t) = self
            .eval_iou_thresholds
            .iter()
            .find(|t| !(0.0..=1.0).contains(*t))
        {
            return Err(Error::Config(format!(
                "evaluation threshold {t} outside [0, 1]"
            )));
        }
        if (self.merge || self.rescore) && !self.link {
            return Err(Error::Config("merge and rescore require link".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tnms_threshold(), 0.7);
        assert_eq!(c.linking().tubelet_len, 6);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let c = PipelineConfig {
            beta: 1.5,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = PipelineConfig {
            tubelet_len: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = PipelineConfig {
            tnms_iou: Some(-0.1),
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = PipelineConfig {
            link: false,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"beta":0.2,"fusion_order":"fuse_then_average"}"#).unwrap();
        assert_eq!(c.beta, 0.2);
        assert_eq!(c.alpha, 0.10);
        assert_eq!(c.fusion_order, FusionOrder::FuseThenAverage);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus":1}"#).is_err());
    }
}
