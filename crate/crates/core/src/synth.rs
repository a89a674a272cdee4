//! Seeded synthetic scenarios that stand in for a trained detector.
//!
//! A scenario holds ground-truth tracks with constant-velocity motion, the
//! degraded per-frame detections a detector might produce for them (misses,
//! localisation noise, class confusion, false positives), and sliding-window
//! tubelet proposals that keep covering frames whose detection was dropped.
//!
//! Every random draw comes from [`SynthRng`], whose algorithm is fixed by
//! [`RNG_ALGORITHM`]; a seed and a config always reproduce the same scenario
//! bit for bit.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::GroundTruthBox;
use crate::geometry::{BBox, Detection};
use crate::tubelets::Tubelet;

/// Identifies the pseudorandom stream. Changing how draws are made must
/// change this string.
pub const RNG_ALGORITHM: &str = "chacha8-seed_from_u64/u53-uniform/box-muller-cos/v1";

/// Deterministic random source for scenario generation.
pub struct SynthRng(ChaCha8Rng);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        SynthRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Standard normal via Box-Muller; one pair of uniforms per draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit(); // (0, 1]
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: u32) -> u32 {
        ((self.unit() * f64::from(n)) as u32).min(n - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    /// Maximum absolute velocity per axis, pixels per frame.
    pub speed_max: f64,
    /// Standard deviation of per-frame positional jitter, pixels.
    pub jitter_sigma: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            speed_max: 3.0,
            jitter_sigma: 0.5,
            min_size: 40.0,
            max_size: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Corner noise as a fraction of box width/height.
    pub loc_sigma: f64,
    pub tp_score_mean: f64,
    pub tp_score_sigma: f64,
    pub fp_score_mean: f64,
    pub fp_score_sigma: f64,
    pub p_miss: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
    pub p_confuse: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            loc_sigma: 0.03,
            tp_score_mean: 0.9,
            tp_score_sigma: 0.05,
            fp_score_mean: 0.3,
            fp_score_sigma: 0.1,
            p_miss: 0.0,
            fp_rate: 0.0,
            p_confuse: 0.0,
        }
    }
}

impl NoiseParams {
    /// Perfect detector: every box reported exactly, score 1.
    pub fn none() -> Self {
        NoiseParams {
            loc_sigma: 0.0,
            tp_score_mean: 1.0,
            tp_score_sigma: 0.0,
            ..NoiseParams::default()
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_miss", self.p_miss),
            ("p_confuse", self.p_confuse),
            ("tp_score_mean", self.tp_score_mean),
            ("fp_score_mean", self.fp_score_mean),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("loc_sigma", self.loc_sigma),
            ("tp_score_sigma", self.tp_score_sigma),
            ("fp_score_sigma", self.fp_score_sigma),
            ("fp_rate", self.fp_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub video: String,
    pub width: f64,
    pub height: f64,
    pub frames: u32,
    pub n_tracks: usize,
    pub n_classes: u32,
    pub tubelet_len: usize,
    /// Proposal box noise as a fraction of box size.
    pub proposal_jitter: f64,
    /// Redundant jittered copies emitted per tubelet window.
    pub tubelet_duplicates: usize,
    pub motion: MotionParams,
    pub noise: NoiseParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            video: "synth".into(),
            width: 640.0,
            height: 480.0,
            frames: 40,
            n_tracks: 10,
            n_classes: 3,
            tubelet_len: 6,
            proposal_jitter: 0.02,
            tubelet_duplicates: 1,
            motion: MotionParams::default(),
            noise: NoiseParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.tubelet_len == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "frames, tubelet_len and n_classes must be at least 1".into(),
            ));
        }
        let m = &self.motion;
        if !(m.min_size > 0.0 && m.min_size <= m.max_size) {
            return Err(Error::Config(format!(
                "box size range [{}, {}] is invalid",
                m.min_size, m.max_size
            )));
        }
        if m.max_size > self.width || m.max_size > self.height {
            return Err(Error::Config("boxes larger than the image".into()));
        }
        if !(m.speed_max >= 0.0 && m.jitter_sigma >= 0.0 && self.proposal_jitter >= 0.0) {
            return Err(Error::Config(
                "motion and jitter parameters must be non-negative".into(),
            ));
        }
        self.noise.validate()
    }
}

/// Frame index of the first frame in every synthetic video.
pub const FIRST_FRAME: u32 = 1;

/// A ground-truth object: one box per frame from [`FIRST_FRAME`] on.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: String,
    pub class_id: u32,
    pub boxes: Vec<BBox>,
}

impl Track {
    pub fn frame_of(&self, k: usize) -> u32 {
        FIRST_FRAME + k as u32
    }
}

/// Where a synthetic detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Track { track: usize, confused: bool },
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: SynthConfig,
    pub tracks: Vec<Track>,
    pub detections: Vec<Detection>,
    /// Aligned with `detections`.
    pub origins: Vec<Origin>,
    pub tubelets: Vec<Tubelet>,
    pub ground_truth: Vec<GroundTruthBox>,
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

/// Moves `start` with constant `velocity`, bouncing off the image borders,
/// and adds Gaussian jitter to each frame's position. Boxes are clamped to
/// stay inside `[0, width] x [0, height]`.
pub fn propagate_track(
    start: BBox,
    velocity: (f64, f64),
    frames: u32,
    jitter_sigma: f64,
    width: f64,
    height: f64,
    rng: &mut SynthRng,
) -> Vec<BBox> {
    let (w, h) = (start.width().min(width), start.height().min(height));
    (0..frames)
        .map(|t| {
            let t = f64::from(t);
            let nx = reflect(start.x1() + velocity.0 * t, 0.0, width - w);
            let ny = reflect(start.y1() + velocity.1 * t, 0.0, height - h);
            let x = (nx + jitter_sigma * rng.normal()).clamp(0.0, width - w);
            let y = (ny + jitter_sigma * rng.normal()).clamp(0.0, height - h);
            BBox::new(x, y, x + w, y + h).expect("clamped box is valid")
        })
        .collect()
}

pub fn generate_tracks(
    rng: &mut SynthRng,
    n_tracks: usize,
    frames: u32,
    n_classes: u32,
    width: f64,
    height: f64,
    motion: &MotionParams,
) -> Vec<Track> {
    (0..n_tracks)
        .map(|k| {
            let w = rng.uniform(motion.min_size, motion.max_size);
            let h = rng.uniform(motion.min_size, motion.max_size);
            let x = rng.uniform(0.0, width - w);
            let y = rng.uniform(0.0, height - h);
            let v = (
                rng.uniform(-motion.speed_max, motion.speed_max),
                rng.uniform(-motion.speed_max, motion.speed_max),
            );
            let class_id = rng.below(n_classes);
            let start = BBox::new(x, y, x + w, y + h).expect("sampled box is valid");
            Track {
                id: format!("t{k}"),
                class_id,
                boxes: propagate_track(start, v, frames, motion.jitter_sigma, width, height, rng),
            }
        })
        .collect()
}

/// Proposal id shared by every tubelet window that covers `track` at `frame`.
pub fn proposal_id(video: &str, track: &str, frame: u32) -> String {
    format!("{video}/{track}/{frame}")
}

fn jitter_box(b: &BBox, rel: f64, rng: &mut SynthRng) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut c = [
        b.x1() + rel * w * rng.normal(),
        b.y1() + rel * h * rng.normal(),
        b.x2() + rel * w * rng.normal(),
        b.y2() + rel * h * rng.normal(),
    ];
    if c[2] < c[0] {
        c.swap(0, 2);
    }
    if c[3] < c[1] {
        c.swap(1, 3);
    }
    BBox::from_array(c).expect("finite jittered box")
}

fn clipped_score(rng: &mut SynthRng, mean: f64, sigma: f64) -> f64 {
    (mean + sigma * rng.normal()).clamp(0.0, 1.0)
}

/// Turns ground-truth tracks into detector output.
///
/// Per frame and track, in that order: drop with `p_miss`, jitter corners,
/// swap class with `p_confuse`, draw a score. False positives follow each
/// frame's true detections. True detections carry the proposal id of their
/// track box at that frame.
pub fn degrade(
    rng: &mut SynthRng,
    tracks: &[Track],
    config: &SynthConfig,
) -> (Vec<Detection>, Vec<Origin>) {
    let SynthConfig {
        frames,
        n_classes,
        width,
        height,
        ref noise,
        ref video,
        ..
    } = *config;
    let mut dets = Vec::new();
    let mut origins = Vec::new();
    for k in 0..frames as usize {
        let frame = FIRST_FRAME + k as u32;
        for (ti, track) in tracks.iter().enumerate() {
            let Some(b) = track.boxes.get(k) else {
                continue;
            };
            if rng.bernoulli(noise.p_miss) {
                continue;
            }
            let bbox = jitter_box(b, noise.loc_sigma, rng);
            let confused = n_classes > 1 && rng.bernoulli(noise.p_confuse);
            let class_id = if confused {
                (track.class_id + 1 + rng.below(n_classes - 1)) % n_classes
            } else {
                track.class_id
            };
            let score = clipped_score(rng, noise.tp_score_mean, noise.tp_score_sigma);
            dets.push(
                Detection::new(video.as_str(), frame, class_id, score, bbox)
                    .expect("clipped score")
                    .with_proposal(proposal_id(video, &track.id, frame)),
            );
            origins.push(Origin::Track {
                track: ti,
                confused,
            });
        }

        let whole = noise.fp_rate.floor() as usize;
        let extra = usize::from(rng.bernoulli(noise.fp_rate.fract()));
        for f in 0..whole + extra {
            let w = rng.uniform(20.0, 100.0_f64.min(width));
            let h = rng.uniform(20.0, 100.0_f64.min(height));
            let x = rng.uniform(0.0, width - w);
            let y = rng.uniform(0.0, height - h);
            let class_id = rng.below(n_classes);
            let score = clipped_score(rng, noise.fp_score_mean, noise.fp_score_sigma);
            let bbox = BBox::new(x, y, x + w, y + h).expect("sampled box is valid");
            dets.push(
                Detection::new(video.as_str(), frame, class_id, score, bbox)
                    .expect("clipped score")
                    .with_proposal(format!("{video}/fp/{frame}/{f}")),
            );
            origins.push(Origin::FalsePositive);
        }
    }
    (dets, origins)
}

/// Sliding windows of `n` frames over every track, built from one jittered
/// proposal box per (track, frame). Frames whose detection was dropped are
/// still covered. Each window may be followed by `duplicates` redundant
/// copies with extra jitter, lower scores and ids no detection refers to.
pub fn derive_tubelets(
    rng: &mut SynthRng,
    tracks: &[Track],
    n: usize,
    jitter: f64,
    duplicates: usize,
    video: &str,
) -> Vec<Tubelet> {
    let mut out = Vec::new();
    for track in tracks {
        let proposals: Vec<(BBox, f64, String)> = track
            .boxes
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let pb = jitter_box(b, jitter, rng);
                let score = clipped_score(rng, 0.85, 0.05);
                (pb, score, proposal_id(video, &track.id, track.frame_of(k)))
            })
            .collect();
        if proposals.len() < n {
            continue;
        }
        for end in n - 1..proposals.len() {
            let window = &proposals[end + 1 - n..=end];
            let end_frame = track.frame_of(end);
            let base_id = format!("{}/{end_frame}", track.id);
            out.push(Tubelet {
                id: base_id.clone(),
                video: video.to_string(),
                end_frame,
                boxes: window.iter().map(|p| p.0).collect(),
                box_scores: window.iter().map(|p| p.1).collect(),
                box_ids: window.iter().map(|p| p.2.clone()).collect(),
            });
            for d in 1..=duplicates {
                out.push(Tubelet {
                    id: format!("{base_id}#d{d}"),
                    video: video.to_string(),
                    end_frame,
                    boxes: window
                        .iter()
                        .map(|p| jitter_box(&p.0, jitter, rng))
                        .collect(),
                    box_scores: window.iter().map(|p| p.1 * 0.8).collect(),
                    box_ids: window.iter().map(|p| format!("{}#d{d}", p.2)).collect(),
                });
            }
        }
    }
    out
}

pub fn ground_truth(tracks: &[Track], video: &str) -> Vec<GroundTruthBox> {
    let mut out = Vec::new();
    let len = tracks.iter().map(|t| t.boxes.len()).max().unwrap_or(0);
    for k in 0..len {
        for t in tracks {
            if let Some(b) = t.boxes.get(k) {
                out.push(GroundTruthBox {
                    video: video.to_string(),
                    frame: t.frame_of(k),
                    class_id: t.class_id,
                    bbox: *b,
                    track_id: t.id.clone(),
                });
            }
        }
    }
    out
}

/// Builds a complete scenario. Draw order: tracks, detections, tubelets.
pub fn generate_scenario(config: &SynthConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = SynthRng::new(config.seed);
    let tracks = generate_tracks(
        &mut rng,
        config.n_tracks,
        config.frames,
        config.n_classes,
        config.width,
        config.height,
        &config.motion,
    );
    let (detections, origins) = degrade(&mut rng, &tracks, config);
    let tubelets = derive_tubelets(
        &mut rng,
        &tracks,
        config.tubelet_len,
        config.proposal_jitter,
        config.tubelet_duplicates,
        &config.video,
    );
    let ground_truth = ground_truth(&tracks, &config.video);
    Ok(Scenario {
        config: config.clone(),
        tracks,
        detections,
        origins,
        tubelets,
        ground_truth,
    })
}
