//! Input builders shared by the benchmarks.

use std::collections::BTreeMap;

use tubelink::synth::{generate_scenario, NoiseParams, SynthConfig, SynthRng};
use tubelink::{BBox, Detection, Scenario};

/// `frames` frames with `per_frame` random detections each, one class.
pub fn random_frames(seed: u64, frames: u32, per_frame: usize) -> BTreeMap<u32, Vec<Detection>> {
    let mut rng = SynthRng::new(seed);
    (1..=frames)
        .map(|f| {
            let dets = (0..per_frame)
                .map(|_| {
                    let x = rng.uniform(0.0, 600.0);
                    let y = rng.uniform(0.0, 440.0);
                    let b = BBox::new(x, y, x + 40.0, y + 40.0).unwrap();
                    Detection::new("bench", f, 0, rng.unit(), b).unwrap()
                })
                .collect();
            (f, dets)
        })
        .collect()
}

/// Row-major `n x n` scores in `[0, 1)`.
pub fn random_scores(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SynthRng::new(seed);
    (0..n * n).map(|_| rng.unit()).collect()
}

/// A noisy scenario sized like the fragment-recovery acceptance case.
pub fn noisy_scenario(seed: u64, tracks: usize, frames: u32) -> Scenario {
    generate_scenario(&SynthConfig {
        seed,
        n_tracks: tracks,
        frames,
        noise: NoiseParams {
            p_miss: 0.1,
            p_confuse: 0.05,
            fp_rate: 1.0,
            ..NoiseParams::default()
        },
        ..SynthConfig::default()
    })
    .unwrap()
}
