//! Post-processing pipeline for tubelet-based video object detection.
//!
//! The crate covers everything downstream of the network: anchor cuboids and
//! tubelet suppression, RoI feature extraction with temporal max pooling,
//! double-head score fusion, long-term tube linking with tubelet-guided
//! fragment merging, frame-level AP evaluation, and a seeded synthetic
//! scenario generator that stands in for a trained detector.

pub mod error;
pub mod evaluation;
pub mod feataggr;
pub mod geometry;
pub mod headfusion;
pub mod linking;
pub mod pipeline;
pub mod synth;
pub mod tubelets;

pub use error::{Error, Result};
pub use evaluation::GroundTruthBox;
pub use feataggr::{FeatureMap, RoiFeature};
pub use geometry::{BBox, Detection};
pub use headfusion::ScoreVector;
pub use linking::{LinkingConfig, Tube};
pub use pipeline::PipelineConfig;
pub use synth::Scenario;
pub use tubelets::Tubelet;
