//! Dice overlap and 95th-percentile Hausdorff distance on binary masks.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(extents: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if extents.iter().product::<usize>() != data.len() || extents.contains(&0) {
            return Err(invalid(format!(
                "mask of extents {extents:?} cannot hold {} voxels",
                data.len()
            )));
        }
        Ok(Self {
            extents,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [_, h, w] = extents;
        let data = (0..extents.iter().product::<usize>())
            .map(|i| f(i / (h * w), (i / w) % h, i % w))
            .collect();
        Self {
            extents,
            spacing: [1.0; 3],
            data,
        }
    }

    /// Thresholds the first channel of a volume at `threshold`.
    pub fn from_volume(volume: &Tensor, threshold: f32) -> Result<Self> {
        volume.expect_volume("mask")?;
        Self::new(volume.extents(), volume.channel(0).iter().map(|&v| v >= threshold).collect())
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn to_volume(&self) -> Tensor {
        let [d, h, w] = self.extents;
        Tensor::new(vec![1, d, h, w], self.data.iter().map(|&v| v as u8 as f32).collect()).expect("sized")
    }

    fn expect_same_grid(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.extents != other.extents {
            return Err(Error::ShapeMismatch {
                op,
                left: self.extents.to_vec(),
                right: other.extents.to_vec(),
            });
        }
        Ok(())
    }

    /// Foreground voxels with a background 6-neighbor or on the grid edge.
    pub fn boundary(&self) -> BinaryMask {
        let [d, h, w] = self.extents;
        let at = |z: usize, y: usize, x: usize| self.data[(z * h + y) * w + x];
        BinaryMask::from_fn(self.extents, |z, y, x| {
            if !at(z, y, x) {
                return false;
            }
            if z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w {
                return true;
            }
            !(at(z - 1, y, x) && at(z + 1, y, x) && at(z, y - 1, x) && at(z, y + 1, x) && at(z, y, x - 1) && at(z, y, x + 1))
        })
        .with_spacing(self.spacing)
        .expect("validated spacing")
    }
}

/// `2|a∩b| / (|a|+|b|)`, 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.expect_same_grid(b, "dice")?;
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// One-dimensional squared distance transform along a strided line
/// (lower envelope of parabolas), with sample positions `i · spacing`.
fn edt_line(f: &mut [f64], spacing: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * spacing;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    out.clear();
    if v.is_empty() {
        out.resize(n, f64::INFINITY);
    } else {
        let mut k = 0;
        for q in 0..n {
            while k + 1 < v.len() && z[k + 1] < pos(q) {
                k += 1;
            }
            let d = pos(q) - pos(v[k]);
            out.push(d * d + f[v[k]]);
        }
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance from every voxel to the nearest set voxel.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let [d, h, w] = mask.extents;
    let mut f: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let strides = [h * w, w, 1];
    let dims = [d, h, w];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for start in 0..f.len() {
            // visit each line once, from its first element
            if (start / stride) % n != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| f[start + i * stride]));
            edt_line(&mut line, mask.spacing[axis], &mut v, &mut z, &mut out);
            for (i, &val) in line.iter().enumerate() {
                f[start + i * stride] = val;
            }
        }
    }
    f
}

fn directed_surface_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let dt = squared_distance_transform(to);
    from.data
        .iter()
        .zip(dt)
        .filter(|(&b, _)| b)
        .map(|(_, d2)| d2.sqrt())
        .collect()
}

/// Nearest-rank percentile of a non-empty sample.
pub fn nearest_rank(values: &mut [f64], percentile: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((percentile / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// 95th percentile (nearest rank) of the pooled surface distances in both
/// directions. Undefined when either mask is empty.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    hausdorff_percentile(a, b, 95.0)
}

pub fn hausdorff_percentile(a: &BinaryMask, b: &BinaryMask, percentile: f64) -> Result<f64> {
    a.expect_same_grid(b, "hd95")?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedDistance);
    }
    let (sa, sb) = (a.boundary(), b.boundary());
    let mut pooled = directed_surface_distances(&sa, &sb);
    pooled.extend(directed_surface_distances(&sb, &sa));
    Ok(nearest_rank(&mut pooled, percentile))
}

pub const METRICS_CSV_HEADER: &str = "run_id,case_id,mode,ensemble_size,steps,dice,hd95";

/// One evaluation record. An undefined HD95 is written as `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub case_id: String,
    pub mode: String,
    pub ensemble_size: usize,
    pub steps: usize,
    pub dice: f64,
    pub hd95: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let hd = self.hd95.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        format!(
            "{},{},{},{},{},{:.6},{}",
            self.run_id, self.case_id, self.mode, self.ensemble_size, self.steps, self.dice, hd
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(ext: usize, lo: [usize; 3], size: usize) -> BinaryMask {
        BinaryMask::from_fn([ext; 3], |z, y, x| {
            [z, y, x].iter().zip(lo).all(|(&c, l)| c >= l && c < l + size)
        })
    }

    fn brute_hd(a: &BinaryMask, b: &BinaryMask, pct: f64) -> f64 {
        let coords = |m: &BinaryMask| -> Vec<[f64; 3]> {
            let [_, h, w] = m.extents();
            let s = m.spacing();
            m.data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v)
                .map(|(i, _)| [(i / (h * w)) as f64 * s[0], ((i / w) % h) as f64 * s[1], (i % w) as f64 * s[2]])
                .collect()
        };
        let (pa, pb) = (coords(&a.boundary()), coords(&b.boundary()));
        let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
            set.iter()
                .map(|q| {
                    let d2: f64 = (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum();
                    d2
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        };
        let mut all: Vec<f64> = pa.iter().map(|p| nearest(p, &pb)).collect();
        all.extend(pb.iter().map(|p| nearest(p, &pa)));
        all.sort_by(|x, y| x.total_cmp(y));
        let rank = ((pct / 100.0) * all.len() as f64).ceil() as usize;
        all[rank.max(1) - 1]
    }

    fn brute_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let (mut i, mut na, mut nb) = (0, 0, 0);
        for k in 0..a.data().len() {
            na += a.data()[k] as usize;
            nb += b.data()[k] as usize;
            i += (a.data()[k] && b.data()[k]) as usize;
        }
        if na + nb == 0 {
            1.0
        } else {
            2.0 * i as f64 / (na + nb) as f64
        }
    }

    fn random_mask(rng: &mut ChaCha8Rng, ext: [usize; 3], p: f64) -> BinaryMask {
        BinaryMask::from_fn(ext, |_, _, _| rng.gen_bool(p))
    }

    #[test]
    fn dice_examples() {
        let a = cube(4, [0, 0, 0], 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &cube(4, [2, 2, 2], 2)).unwrap(), 0.0);
        assert_eq!(dice(&a, &cube(4, [1, 0, 0], 2)).unwrap(), 0.5);
        let empty = BinaryMask::from_fn([4; 3], |_, _, _| false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &cube(5, [0, 0, 0], 2)).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = cube(6, [1, 1, 1], 3);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let p = BinaryMask::from_fn([8; 3], |z, y, x| (z, y, x) == (1, 2, 2));
        let q = BinaryMask::from_fn([8; 3], |z, y, x| (z, y, x) == (4, 2, 2));
        assert_eq!(hd95(&p, &q).unwrap(), 3.0);
        let empty = BinaryMask::from_fn([8; 3], |_, _, _| false);
        assert!(matches!(hd95(&p, &empty), Err(Error::UndefinedDistance)));
        assert!(matches!(hd95(&empty, &empty), Err(Error::UndefinedDistance)));
    }

    #[test]
    fn spacing_scales_distances() {
        let p = BinaryMask::from_fn([8; 3], |z, y, x| (z, y, x) == (1, 2, 2)).with_spacing([2.0, 1.0, 1.0]).unwrap();
        let q = BinaryMask::from_fn([8; 3], |z, y, x| (z, y, x) == (4, 2, 2)).with_spacing([2.0, 1.0, 1.0]).unwrap();
        assert_eq!(hd95(&p, &q).unwrap(), 6.0);
        assert!(BinaryMask::from_fn([2; 3], |_, _, _| true).with_spacing([0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let b = cube(5, [0, 0, 0], 5).boundary();
        assert_eq!(b.count(), 125 - 27);
        let b = cube(7, [1, 1, 1], 5).boundary();
        assert_eq!(b.count(), 125 - 27);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let ext = [rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8)];
            let m = random_mask(&mut rng, ext, 0.1)
                .with_spacing([rng.gen_range(0.5..2.0), 1.0, rng.gen_range(0.5..2.0)])
                .unwrap();
            let dt = squared_distance_transform(&m);
            let [_, h, w] = ext;
            let s = m.spacing();
            for (i, &d) in dt.iter().enumerate() {
                let mut best = f64::INFINITY;
                for (j, &on) in m.data().iter().enumerate() {
                    if on {
                        let dz = ((i / (h * w)) as f64 - (j / (h * w)) as f64) * s[0];
                        let dy = (((i / w) % h) as f64 - ((j / w) % h) as f64) * s[1];
                        let dx = ((i % w) as f64 - (j % w) as f64) * s[2];
                        best = best.min(dz * dz + dy * dy + dx * dx);
                    }
                }
                assert!(d == best || (d - best).abs() <= 1e-9 * best.max(1.0), "{d} vs {best}");
            }
        }
    }

    #[test]
    fn metrics_match_oracles_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let ext = [rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8)];
            let p = rng.gen_range(0.02..0.6);
            let a = random_mask(&mut rng, ext, p);
            let b = random_mask(&mut rng, ext, p);
            assert_eq!(dice(&a, &b).unwrap(), brute_dice(&a, &b));
            if a.is_empty() || b.is_empty() {
                assert!(hd95(&a, &b).is_err());
                continue;
            }
            let h = hd95(&a, &b).unwrap();
            assert_eq!(h, brute_hd(&a, &b, 95.0));
            assert!(h <= hausdorff_percentile(&a, &b, 100.0).unwrap());
        }
    }

    #[test]
    fn csv_row() {
        let row = MetricsRow {
            run_id: "r".into(),
            case_id: "c1".into(),
            mode: "patchddm".into(),
            ensemble_size: 5,
            steps: 20,
            dice: 0.5,
            hd95: None,
        };
        assert_eq!(row.to_csv(), "r,c1,patchddm,5,20,0.500000,undefined");
        assert_eq!(row.to_csv().split(',').count(), METRICS_CSV_HEADER.split(',').count());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), p in 0.05f64..0.7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, [6, 5, 7], p);
            let b = random_mask(&mut rng, [6, 5, 7], p);
            let d = dice(&a, &b).unwrap();
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            if !a.is_empty() && !b.is_empty() {
                prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
            }
        }
    }
}
