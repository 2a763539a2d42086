//! Coordinate encoding, center-weighted patch sampling and input assembly.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const COORD_CHANNELS: usize = 3;

/// Network input channel order `[x_t | condition | CE]`, shared by training
/// and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub mask_channels: usize,
    pub condition_channels: usize,
}

impl ChannelLayout {
    pub fn new(condition_channels: usize) -> Self {
        Self {
            mask_channels: 1,
            condition_channels,
        }
    }

    pub fn total(&self) -> usize {
        self.mask_channels + self.condition_channels + COORD_CHANNELS
    }

    pub fn condition_start(&self) -> usize {
        self.mask_channels
    }

    pub fn coords_start(&self) -> usize {
        self.mask_channels + self.condition_channels
    }

    pub fn assemble(&self, x_t: &Tensor, condition: &Tensor, coords: &Tensor) -> Result<Tensor> {
        let counts = [x_t.channels(), condition.channels(), coords.channels()];
        if counts != [self.mask_channels, self.condition_channels, COORD_CHANNELS] {
            return Err(Error::ShapeMismatch {
                op: "channel layout",
                left: vec![self.mask_channels, self.condition_channels, COORD_CHANNELS],
                right: counts.to_vec(),
            });
        }
        Tensor::concat_channels(&[x_t, condition, coords])
    }

    /// Inverse of [`assemble`](Self::assemble).
    pub fn split(&self, input: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        if input.channels() != self.total() {
            return Err(Error::ShapeMismatch {
                op: "channel layout",
                left: vec![self.total()],
                right: input.shape().to_vec(),
            });
        }
        Ok((
            input.select_channels(0, self.mask_channels)?,
            input.select_channels(self.condition_start(), self.condition_channels)?,
            input.select_channels(self.coords_start(), COORD_CHANNELS)?,
        ))
    }
}

/// Three channels where channel `d` holds `−1 + 2i/(S_d − 1)` at index `i`
/// along axis `d`.
pub fn build_coordinate_grid(extents: [usize; 3]) -> Result<Tensor> {
    if let Some(&e) = extents.iter().find(|&&e| e < 2) {
        return Err(invalid(format!("coordinate grid needs extents of at least 2, got {e}")));
    }
    let [d, h, w] = extents;
    let ramp = |i: usize, s: usize| (-1.0 + 2.0 * i as f64 / (s - 1) as f64) as f32;
    let mut grid = Tensor::zeros_volume(COORD_CHANNELS, extents);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                grid.channel_mut(0)[idx] = ramp(z, d);
                grid.channel_mut(1)[idx] = ramp(y, h);
                grid.channel_mut(2)[idx] = ramp(x, w);
            }
        }
    }
    Ok(grid)
}

/// `[x_t | images | CE]` over the whole volume.
pub fn full_volume_input(images: &Tensor, x_t: &Tensor) -> Result<Tensor> {
    images.expect_volume("full_volume_input")?;
    x_t.expect_volume("full_volume_input")?;
    if images.extents() != x_t.extents() {
        return Err(Error::ShapeMismatch {
            op: "full_volume_input",
            left: images.shape().to_vec(),
            right: x_t.shape().to_vec(),
        });
    }
    let coords = build_coordinate_grid(images.extents())?;
    ChannelLayout {
        mask_channels: x_t.channels(),
        condition_channels: images.channels(),
    }
    .assemble(x_t, images, &coords)
}

/// Per-axis law of `X + Y` with `X ~ U[−1/3, 1/3]` and `Y ~ U[−2/3, 2/3]`:
/// a trapezoid with a flat top of 3/4 on `|z| ≤ 1/3`.
#[derive(Clone, Debug)]
pub struct CenterWeightedSampler {
    rng: ChaCha8Rng,
    x: Uniform<f64>,
    y: Uniform<f64>,
}

impl CenterWeightedSampler {
    pub fn new(seed: u64) -> Self {
        Self::from_rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            x: Uniform::new_inclusive(-1.0 / 3.0, 1.0 / 3.0),
            y: Uniform::new_inclusive(-2.0 / 3.0, 2.0 / 3.0),
        }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn sample_axis(&mut self) -> f64 {
        let z = self.x.sample(&mut self.rng) + self.y.sample(&mut self.rng);
        z.clamp(-1.0, 1.0)
    }

    /// Normalized center in `[−1, 1]³`, axes drawn independently.
    pub fn sample_center(&mut self) -> [f64; 3] {
        [self.sample_axis(), self.sample_axis(), self.sample_axis()]
    }

    pub fn pdf(z: f64) -> f64 {
        let a = z.abs();
        if a <= 1.0 / 3.0 {
            0.75
        } else if a <= 1.0 {
            9.0 / 8.0 * (1.0 - a)
        } else {
            0.0
        }
    }

    pub fn cdf(z: f64) -> f64 {
        if z <= -1.0 {
            0.0
        } else if z <= -1.0 / 3.0 {
            9.0 / 16.0 * (1.0 + z).powi(2)
        } else if z <= 1.0 / 3.0 {
            0.25 + 0.75 * (z + 1.0 / 3.0)
        } else if z < 1.0 {
            1.0 - 9.0 / 16.0 * (1.0 - z).powi(2)
        } else {
            1.0
        }
    }
}

/// A patch placed inside a volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
    /// Position of the origin within the admissible range, mapped to `[−1, 1]`.
    pub center: [f64; 3],
}

impl PatchSpec {
    /// Places a patch whose normalized position is `center`; positions that
    /// would overhang are clamped to the nearest admissible origin.
    pub fn from_center(center: [f64; 3], volume: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        let mut origin = [0; 3];
        let mut actual = [0.0; 3];
        for a in 0..3 {
            if extent[a] == 0 || extent[a] > volume[a] {
                return Err(Error::PatchOutOfBounds {
                    origin: [0; 3],
                    extent,
                    volume,
                });
            }
            let room = volume[a] - extent[a];
            let z = center[a].clamp(-1.0, 1.0);
            origin[a] = (((z + 1.0) / 2.0 * room as f64).round() as usize).min(room);
            actual[a] = if room == 0 {
                0.0
            } else {
                2.0 * origin[a] as f64 / room as f64 - 1.0
            };
        }
        Ok(Self {
            origin,
            extent,
            center: actual,
        })
    }

    pub fn full(volume: [usize; 3]) -> Self {
        Self {
            origin: [0; 3],
            extent: volume,
            center: [0.0; 3],
        }
    }
}

/// Crops every channel; coordinate channels keep their global values.
pub fn extract_training_patch(volume_with_ce: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    volume_with_ce.crop(spec.origin, spec.extent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn distinct(t: &[f32]) -> Vec<f32> {
        let mut v: Vec<f32> = t.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }

    #[test]
    fn grid_values() {
        let g = build_coordinate_grid([2, 2, 2]).unwrap();
        for c in 0..3 {
            assert_eq!(distinct(g.channel(c)), vec![-1.0, 1.0]);
        }
        let g = build_coordinate_grid([5, 5, 5]).unwrap();
        assert_eq!(distinct(g.channel(1)), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        let g = build_coordinate_grid([5, 7, 3]).unwrap();
        let centre = (2 * 7 + 3) * 3 + 1;
        for c in 0..3 {
            assert_eq!(g.channel(c)[centre], 0.0);
        }
        assert!(build_coordinate_grid([1, 4, 4]).is_err());
    }

    #[test]
    fn grid_is_affine_per_axis() {
        let g = build_coordinate_grid([4, 6, 5]).unwrap();
        let (h, w) = (6, 5);
        for z in 0..4 {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    assert_eq!(g.channel(0)[i], g.channel(0)[z * h * w]);
                    assert_eq!(g.channel(1)[i], g.channel(1)[y * w]);
                    assert_eq!(g.channel(2)[i], g.channel(2)[x]);
                }
            }
        }
    }

    #[test]
    fn density_values() {
        assert_eq!(CenterWeightedSampler::pdf(0.0), 0.75);
        assert_eq!(CenterWeightedSampler::pdf(1.0), 0.0);
        assert_eq!(CenterWeightedSampler::pdf(-1.0), 0.0);
        assert!((CenterWeightedSampler::pdf(2.0 / 3.0) - 0.375).abs() < 1e-12);
        // trapezoid integrates to one
        let n = 200_000;
        let h = 2.0 / n as f64;
        let area: f64 = (0..n).map(|i| CenterWeightedSampler::pdf(-1.0 + (i as f64 + 0.5) * h) * h).sum();
        assert!((area - 1.0).abs() < 1e-6);
        assert!((CenterWeightedSampler::cdf(0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cdf_is_integral_of_pdf() {
        let n = 30_000;
        let h = 2.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            acc += CenterWeightedSampler::pdf(-1.0 + (i as f64 + 0.5) * h) * h;
            let z = -1.0 + (i + 1) as f64 * h;
            assert!((acc - CenterWeightedSampler::cdf(z)).abs() < 1e-6);
        }
    }

    #[test]
    fn empirical_marginal_matches_trapezoid() {
        let mut s = CenterWeightedSampler::new(2024);
        let mut draws: Vec<f64> = (0..100_000).map(|_| s.sample_axis()).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let f = CenterWeightedSampler::cdf(z);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "{ks}");
    }

    #[test]
    fn patch_placement() {
        let p = PatchSpec::from_center([-1.0, 0.0, 1.0], [32, 32, 32], [16, 16, 16]).unwrap();
        assert_eq!(p.origin, [0, 8, 16]);
        assert_eq!(p.center, [-1.0, 0.0, 1.0]);
        let p = PatchSpec::from_center([5.0, -3.0, 0.0], [32, 32, 32], [16, 16, 16]).unwrap();
        assert_eq!(p.origin, [16, 0, 8]);
        assert!(PatchSpec::from_center([0.0; 3], [8, 8, 8], [16, 8, 8]).is_err());
    }

    #[test]
    fn crop_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Tensor::randn(&[2, 5, 5, 5], &mut rng);
        let ce = build_coordinate_grid([5, 5, 5]).unwrap();
        let vol = Tensor::concat_channels(&[&data, &ce]).unwrap();
        assert_eq!(extract_training_patch(&vol, &PatchSpec::full([5, 5, 5])).unwrap(), vol);
        let spec = PatchSpec {
            origin: [0; 3],
            extent: [2; 3],
            center: [-1.0; 3],
        };
        let patch = extract_training_patch(&vol, &spec).unwrap();
        assert_eq!(distinct(patch.channel(2)), vec![-1.0, -0.5]);
        let bad = PatchSpec {
            origin: [4, 0, 0],
            extent: [2; 3],
            center: [0.0; 3],
        };
        assert!(matches!(
            extract_training_patch(&vol, &bad),
            Err(Error::PatchOutOfBounds { .. })
        ));
    }

    #[test]
    fn channel_counts() {
        let x = Tensor::zeros_volume(1, [4, 4, 4]);
        assert_eq!(full_volume_input(&Tensor::zeros_volume(4, [4, 4, 4]), &x).unwrap().channels(), 8);
        let out = full_volume_input(&Tensor::zeros_volume(2, [4, 4, 4]), &x).unwrap();
        assert_eq!(out.channels(), 6);
        assert_eq!(out.extents(), [4, 4, 4]);
        assert!(full_volume_input(&Tensor::zeros_volume(2, [4, 4, 8]), &x).is_err());
    }

    #[test]
    fn layout_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = ChannelLayout::new(2);
        let x = Tensor::randn(&[1, 4, 4, 4], &mut rng);
        let b = Tensor::randn(&[2, 4, 4, 4], &mut rng);
        let ce = build_coordinate_grid([4, 4, 4]).unwrap();
        let joined = layout.assemble(&x, &b, &ce).unwrap();
        assert_eq!(joined, full_volume_input(&b, &x).unwrap());
        let (x2, b2, ce2) = layout.split(&joined).unwrap();
        assert_eq!((&x2, &b2, &ce2), (&x, &b, &ce));
        assert!(layout.assemble(&b, &x, &ce).is_err());
    }

    proptest! {
        #[test]
        fn patch_ce_is_restriction_of_global_grid(
            d in 4usize..12, h in 4usize..12, w in 4usize..12, seed in any::<u64>()
        ) {
            let vol = [d, h, w];
            let grid = build_coordinate_grid(vol).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ext = [rng.gen_range(1..=d), rng.gen_range(1..=h), rng.gen_range(1..=w)];
            let mut s = CenterWeightedSampler::new(seed);
            let spec = PatchSpec::from_center(s.sample_center(), vol, ext).unwrap();
            let patch = extract_training_patch(&grid, &spec).unwrap();
            for c in 0..3 {
                for z in 0..ext[0] {
                    for y in 0..ext[1] {
                        for x in 0..ext[2] {
                            let p = patch.channel(c)[(z * ext[1] + y) * ext[2] + x];
                            let gi = ((spec.origin[0] + z) * h + spec.origin[1] + y) * w + spec.origin[2] + x;
                            prop_assert_eq!(p.to_bits(), grid.channel(c)[gi].to_bits());
                        }
                    }
                }
            }
        }
    }
}
