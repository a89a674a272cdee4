//! RoI Align on dense feature maps, channel interleaving across frames, and
//! temporal max pooling over a tubelet.

use std::collections::BTreeMap;

use ndarray::{s, Array3};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tubelets::{LevelAssignment, Tubelet};

/// Dense `H x W x C` backbone output. `stride` is the number of input pixels
/// per feature cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
    stride: f64,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, stride: f64) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::precondition(format!(
                "empty feature map {h}x{w}x{c}"
            )));
        }
        if stride.is_nan() || stride <= 0.0 {
            return Err(Error::precondition(format!("feature stride {stride}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::precondition(
                "feature map contains non-finite values",
            ));
        }
        Ok(FeatureMap { data, stride })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Adds the bilinear sample of every channel at cell coordinates `(y, x)`
    /// into `out`. Cell `(i, j)` holds its value at `(i, j)`; neighbours
    /// outside the grid read zero.
    fn bilinear(&self, y: f64, x: f64, out: &mut [f64]) {
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let (h, w) = (self.height() as i64, self.width() as i64);
        let corners = [
            (y0 as i64, x0 as i64, (1.0 - ly) * (1.0 - lx)),
            (y0 as i64, x0 as i64 + 1, (1.0 - ly) * lx),
            (y0 as i64 + 1, x0 as i64, ly * (1.0 - lx)),
            (y0 as i64 + 1, x0 as i64 + 1, ly * lx),
        ];
        for (r, c, wgt) in corners {
            if wgt == 0.0 || r < 0 || c < 0 || r >= h || c >= w {
                continue;
            }
            let cell = self.data.slice(s![r as usize, c as usize, ..]);
            for (o, v) in out.iter_mut().zip(cell.iter()) {
                *o += wgt * f64::from(*v);
            }
        }
    }
}

/// Fixed-size pooled feature for one box, `h x w x C`.
pub type RoiFeature = Array3<f32>;

/// RoI Align: splits `roi` into `out_h x out_w` bins, bilinearly samples a
/// regular `samples_per_bin x samples_per_bin` grid inside each bin, and
/// averages. The box is given in input pixels.
pub fn roi_align(
    fm: &FeatureMap,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<RoiFeature> {
    if out_h == 0 || out_w == 0 || samples_per_bin == 0 {
        return Err(Error::precondition(format!(
            "roi_align output {out_h}x{out_w} with {samples_per_bin} samples per bin"
        )));
    }
    if roi.area() <= 0.0 {
        return Err(Error::InvalidGeometry(format!(
            "degenerate RoI {:?}",
            roi.to_array()
        )));
    }

    let scale = 1.0 / fm.stride;
    let x1 = roi.x1() * scale;
    let y1 = roi.y1() * scale;
    let bin_w = roi.width() * scale / out_w as f64;
    let bin_h = roi.height() * scale / out_h as f64;
    let n = samples_per_bin as f64;
    let count = n * n;
    let c = fm.channels();

    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    let mut acc = vec![0.0f64; c];
    for by in 0..out_h {
        for bx in 0..out_w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for sy in 0..samples_per_bin {
                let y = y1 + bin_h * (by as f64 + (sy as f64 + 0.5) / n);
                for sx in 0..samples_per_bin {
                    let x = x1 + bin_w * (bx as f64 + (sx as f64 + 0.5) / n);
                    // value of cell (i, j) sits at the cell center (j + 0.5, i + 0.5)
                    fm.bilinear(y - 0.5, x - 0.5, &mut acc);
                }
            }
            for (o, a) in out.slice_mut(s![by, bx, ..]).iter_mut().zip(&acc) {
                *o = (a / count) as f32;
            }
        }
    }
    Ok(out)
}

/// Concatenates per-frame RoI features (oldest first) so that channel `k`
/// of frame offset `t` lands at output channel `N*k + t`.
pub fn concat_interleave(maps: &[RoiFeature]) -> Result<Array3<f32>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::precondition("no RoI features to concatenate"))?;
    let (h, w, c) = first.dim();
    if let Some(bad) = maps.iter().find(|m| m.dim() != (h, w, c)) {
        return Err(Error::precondition(format!(
            "RoI feature shape {:?} does not match {:?}",
            bad.dim(),
            (h, w, c)
        )));
    }
    let n = maps.len();
    let mut out = Array3::<f32>::zeros((h, w, n * c));
    for (t, m) in maps.iter().enumerate() {
        out.slice_mut(s![.., .., t..;n]).assign(m);
    }
    Ok(out)
}

/// Max over the `N` interleaved copies of each channel. Output is `h x w x C`
/// whatever `N` is.
pub fn temporal_pool(concatenated: &Array3<f32>, n_frames: usize) -> Result<RoiFeature> {
    let (h, w, nc) = concatenated.dim();
    if n_frames == 0 || nc % n_frames != 0 {
        return Err(Error::precondition(format!(
            "{nc} channels cannot be split across {n_frames} frames"
        )));
    }
    let c = nc / n_frames;
    let mut out = Array3::<f32>::zeros((h, w, c));
    for ((i, j, k), o) in out.indexed_iter_mut() {
        let base = n_frames * k;
        let mut best = concatenated[[i, j, base]];
        for t in 1..n_frames {
            best = best.max(concatenated[[i, j, base + t]]);
        }
        *o = best;
    }
    Ok(out)
}

/// Per-level feature maps for one frame.
pub type FeaturePyramid = BTreeMap<i32, FeatureMap>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    pub out_h: usize,
    pub out_w: usize,
    pub samples_per_bin: usize,
    pub levels: LevelAssignment,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            out_h: 7,
            out_w: 7,
            samples_per_bin: 2,
            levels: LevelAssignment::default(),
        }
    }
}

/// Level assignment per box, RoI Align per frame, interleave, temporal pool.
///
/// `pyramids` maps a frame index to that frame's feature pyramid.
pub fn aggregate_tubelet_features(
    pyramids: &BTreeMap<u32, FeaturePyramid>,
    tubelet: &Tubelet,
    config: &AggregationConfig,
) -> Result<RoiFeature> {
    let mut per_frame = Vec::with_capacity(tubelet.len());
    for (k, b) in tubelet.boxes.iter().enumerate() {
        let frame = tubelet.frame_of(k);
        let level = config.levels.level_of(b);
        let fm = pyramids
            .get(&frame)
            .and_then(|p| p.get(&level))
            .ok_or_else(|| {
                Error::Resource(format!("no feature map for frame {frame} level {level}"))
            })?;
        per_frame.push(roi_align(
            fm,
            b,
            config.out_h,
            config.out_w,
            config.samples_per_bin,
        )?);
    }
    temporal_pool(&concat_interleave(&per_frame)?, per_frame.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let fm = FeatureMap::new(Array3::from_elem((10, 10, 3), 2.5), 4.0).unwrap();
        let out = roi_align(&fm, &bx(8.0, 8.0, 28.0, 24.0), 7, 7, 2).unwrap();
        assert_eq!(out.dim(), (7, 7, 3));
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn box_over_one_cell() {
        let mut data = Array3::zeros((3, 3, 1));
        data[[1, 2, 0]] = 7.0;
        let fm = FeatureMap::new(data, 1.0).unwrap();
        let out = roi_align(&fm, &bx(2.0, 1.0, 3.0, 2.0), 1, 1, 1).unwrap();
        assert_eq!(out[[0, 0, 0]], 7.0);
    }

    #[test]
    fn bilinear_between_four_cells() {
        let data = array![[[1.0f32], [2.0]], [[3.0], [4.0]]];
        let fm = FeatureMap::new(data, 1.0).unwrap();
        let out = roi_align(&fm, &bx(0.5, 0.5, 1.5, 1.5), 1, 1, 1).unwrap();
        assert_eq!(out[[0, 0, 0]], 2.5);
    }

    #[test]
    fn out_of_bounds_samples_read_zero() {
        let fm = FeatureMap::new(Array3::from_elem((2, 2, 1), 1.0), 1.0).unwrap();
        let out = roi_align(&fm, &bx(10.0, 10.0, 12.0, 12.0), 1, 1, 2).unwrap();
        assert_eq!(out[[0, 0, 0]], 0.0);
    }

    #[test]
    fn degenerate_roi_rejected() {
        let fm = FeatureMap::new(Array3::zeros((2, 2, 1)), 1.0).unwrap();
        assert!(matches!(
            roi_align(&fm, &bx(1.0, 1.0, 1.0, 3.0), 2, 2, 2),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn non_finite_feature_map_rejected() {
        assert!(FeatureMap::new(Array3::from_elem((1, 1, 1), f32::NAN), 1.0).is_err());
    }

    #[test]
    fn interleave_layouts() {
        let a = array![[[1.0f32, 2.0]]];
        let b = array![[[10.0f32, 20.0]]];
        assert_eq!(concat_interleave(std::slice::from_ref(&a)).unwrap(), a);
        let ab = concat_interleave(&[a, b]).unwrap();
        assert_eq!(ab, array![[[1.0f32, 10.0, 2.0, 20.0]]]);

        let frames: Vec<_> = (0..3).map(|t| array![[[t as f32]]]).collect();
        assert_eq!(
            concat_interleave(&frames).unwrap(),
            array![[[0.0f32, 1.0, 2.0]]]
        );
    }

    #[test]
    fn interleave_rejects_shape_mismatch() {
        let a = Array3::<f32>::zeros((2, 2, 3));
        let b = Array3::<f32>::zeros((2, 2, 4));
        assert!(matches!(
            concat_interleave(&[a, b]),
            Err(Error::Precondition(_))
        ));
        assert!(concat_interleave(&[]).is_err());
    }

    #[test]
    fn pool_cases() {
        let f = array![[[0.2f32, 0.9], [0.9, 0.2]]];
        let g = array![[[0.9f32, 0.2], [0.2, 0.9]]];
        let pooled = temporal_pool(&concat_interleave(&[f.clone(), g]).unwrap(), 2).unwrap();
        assert!(pooled.iter().all(|&v| v == 0.9));

        assert_eq!(temporal_pool(&f, 1).unwrap(), f);
        let same = concat_interleave(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert_eq!(temporal_pool(&same, 3).unwrap(), f);
    }

    #[test]
    fn pool_rejects_indivisible_channels() {
        let x = Array3::<f32>::zeros((1, 1, 5));
        assert!(matches!(temporal_pool(&x, 2), Err(Error::Precondition(_))));
        assert!(temporal_pool(&x, 0).is_err());
    }

    fn pyramid_for(
        frames: &[u32],
        value: impl Fn(u32, i32, usize, usize) -> f32,
    ) -> BTreeMap<u32, FeaturePyramid> {
        frames
            .iter()
            .map(|&f| {
                let levels = (2..=5)
                    .map(|l| {
                        let stride = 2f64.powi(l);
                        let data = Array3::from_shape_fn((64, 64, 2), |(i, j, c)| {
                            value(f, l, i, j) + c as f32
                        });
                        (l, FeatureMap::new(data, stride).unwrap())
                    })
                    .collect();
                (f, levels)
            })
            .collect()
    }

    #[test]
    fn single_frame_aggregation_is_roi_align() {
        let pyr = pyramid_for(&[5], |f, l, i, j| {
            (f as f32) + l as f32 * 0.1 + (i * j) as f32 * 0.01
        });
        let b = bx(40.0, 40.0, 140.0, 120.0);
        let t = Tubelet::new("t", "v", 5, vec![b], vec![0.5], vec!["p".into()]).unwrap();
        let cfg = AggregationConfig::default();
        let level = cfg.levels.level_of(&b);
        let direct = roi_align(&pyr[&5][&level], &b, 7, 7, 2).unwrap();
        assert_eq!(aggregate_tubelet_features(&pyr, &t, &cfg).unwrap(), direct);
    }

    #[test]
    fn aggregation_across_levels() {
        let pyr = pyramid_for(&[1, 2], |f, l, i, j| {
            (f as f32) * 3.0 - l as f32 + ((i + 2 * j) % 7) as f32
        });
        let small = bx(10.0, 10.0, 60.0, 60.0);
        let large = bx(10.0, 10.0, 410.0, 410.0);
        let cfg = AggregationConfig::default();
        assert_ne!(cfg.levels.level_of(&small), cfg.levels.level_of(&large));
        let t = Tubelet::new(
            "t",
            "v",
            2,
            vec![small, large],
            vec![0.5; 2],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let out = aggregate_tubelet_features(&pyr, &t, &cfg).unwrap();
        assert_eq!(out.dim(), (7, 7, 2));

        let a = roi_align(&pyr[&1][&cfg.levels.level_of(&small)], &small, 7, 7, 2).unwrap();
        let b = roi_align(&pyr[&2][&cfg.levels.level_of(&large)], &large, 7, 7, 2).unwrap();
        let expected = ndarray::Zip::from(&a).and(&b).map_collect(|x, y| x.max(*y));
        assert_eq!(out, expected);
    }

    #[test]
    fn identical_frames_aggregate_to_one_frame() {
        let pyr = pyramid_for(&[3, 4, 5], |_, l, i, j| {
            l as f32 + (i as f32).sin() * (j as f32).cos()
        });
        let b = bx(30.0, 20.0, 130.0, 90.0);
        let t = Tubelet::new(
            "t",
            "v",
            5,
            vec![b; 3],
            vec![0.5; 3],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let cfg = AggregationConfig::default();
        let one = roi_align(&pyr[&3][&cfg.levels.level_of(&b)], &b, 7, 7, 2).unwrap();
        assert_eq!(aggregate_tubelet_features(&pyr, &t, &cfg).unwrap(), one);
    }

    #[test]
    fn missing_level_is_resource_error() {
        let pyr = pyramid_for(&[1], |_, _, _, _| 0.0);
        let b = bx(0.0, 0.0, 50.0, 50.0);
        let t = Tubelet::new(
            "t",
            "v",
            2,
            vec![b; 2],
            vec![0.5; 2],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(matches!(
            aggregate_tubelet_features(&pyr, &t, &AggregationConfig::default()),
            Err(Error::Resource(_))
        ));
    }

    proptest! {
        #[test]
        fn pool_is_permutation_invariant_and_monotone(
            vals in prop::collection::vec(-5.0f32..5.0, 3 * 2 * 2 * 4),
            bump in 0.0f32..3.0,
            at in 0usize..48,
        ) {
            let frames: Vec<Array3<f32>> = vals
                .chunks(2 * 2 * 4)
                .map(|c| Array3::from_shape_vec((2, 2, 4), c.to_vec()).unwrap())
                .collect();
            let pooled = temporal_pool(&concat_interleave(&frames).unwrap(), 3).unwrap();
            let mut rev = frames.clone();
            rev.reverse();
            prop_assert_eq!(&pooled, &temporal_pool(&concat_interleave(&rev).unwrap(), 3).unwrap());

            let mut raised = frames.clone();
            let f = at / 16;
            let flat = raised[f].as_slice_mut().unwrap();
            flat[at % 16] += bump;
            let higher = temporal_pool(&concat_interleave(&raised).unwrap(), 3).unwrap();
            prop_assert!(higher.iter().zip(pooled.iter()).all(|(h, p)| h >= p));
        }

        #[test]
        fn roi_align_channels_independent(
            vals in prop::collection::vec(-1.0f32..1.0, 8 * 8),
            extra in -3.0f32..3.0,
            x in 0.0f64..20.0, y in 0.0f64..20.0, w in 1.0f64..12.0, h in 1.0f64..12.0,
        ) {
            let one = Array3::from_shape_vec((8, 8, 1), vals.clone()).unwrap();
            let two = Array3::from_shape_fn((8, 8, 2), |(i, j, c)| if c == 0 { vals[i * 8 + j] } else { extra });
            let b = BBox::new(x, y, x + w, y + h).unwrap();
            let a1 = roi_align(&FeatureMap::new(one, 4.0).unwrap(), &b, 3, 3, 2).unwrap();
            let a2 = roi_align(&FeatureMap::new(two, 4.0).unwrap(), &b, 3, 3, 2).unwrap();
            prop_assert_eq!(a1.index_axis(Axis(2), 0), a2.index_axis(Axis(2), 0));
        }
    }
}
