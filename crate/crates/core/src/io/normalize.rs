use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Percentile window used by [`normalize`].
pub const LOW_PERCENTILE: f64 = 1.0;
pub const HIGH_PERCENTILE: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWindow {
    pub low: f32,
    pub high: f32,
    /// No foreground, or the percentile window collapsed to a point.
    pub degenerate: bool,
}

/// Nearest-rank percentile of an already sorted, non-empty slice.
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per channel: maps the 1st–99th percentile window of the nonzero voxels
/// affinely onto `[0, 1]`, clamps outside it, and keeps exact zeros at zero.
/// A collapsed window sets the foreground to 0.5 and flags the channel.
pub fn normalize(volume: &Tensor) -> Result<(Tensor, Vec<ChannelWindow>)> {
    volume.expect_volume("normalize")?;
    if volume.is_empty() {
        return Err(invalid("normalize: empty volume"));
    }
    if !volume.is_finite() {
        return Err(Error::InvalidArgument("normalize: volume has non-finite values".into()));
    }
    let mut out = volume.clone();
    let mut windows = Vec::with_capacity(volume.channels());
    for c in 0..volume.channels() {
        let mut fg: Vec<f32> = volume.channel(c).iter().copied().filter(|&v| v != 0.0).collect();
        if fg.is_empty() {
            windows.push(ChannelWindow {
                low: 0.0,
                high: 0.0,
                degenerate: true,
            });
            continue;
        }
        fg.sort_by(f32::total_cmp);
        let (low, high) = (percentile_sorted(&fg, LOW_PERCENTILE), percentile_sorted(&fg, HIGH_PERCENTILE));
        let degenerate = high <= low;
        if degenerate {
            log::warn!("normalize: channel {c} has a collapsed percentile window at {low}");
        }
        let span = (high - low) as f64;
        for v in out.channel_mut(c) {
            if *v == 0.0 {
                continue;
            }
            *v = if degenerate {
                0.5
            } else {
                ((*v - low) as f64 / span).clamp(0.0, 1.0) as f32
            };
        }
        windows.push(ChannelWindow { low, high, degenerate });
    }
    Ok((out, windows))
}

/// Extents before padding and where the original sits inside the padded grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub original: [usize; 3],
    pub offset: [usize; 3],
}

/// Zero-pads each extent up to the next multiple, splitting the padding
/// evenly with any odd voxel on the high side.
pub fn pad_to_multiple(volume: &Tensor, multiple: usize) -> Result<(Tensor, PadRecord)> {
    volume.expect_volume("pad_to_multiple")?;
    if multiple == 0 {
        return Err(invalid("pad_to_multiple: multiple must be at least 1"));
    }
    let original = volume.extents();
    let mut padded = [0; 3];
    let mut offset = [0; 3];
    for a in 0..3 {
        padded[a] = original[a].div_ceil(multiple) * multiple;
        offset[a] = (padded[a] - original[a]) / 2;
    }
    let mut out = Tensor::zeros_volume(volume.channels(), padded);
    out.paste(volume, offset)?;
    Ok((out, PadRecord { original, offset }))
}

pub fn crop_back(volume: &Tensor, record: &PadRecord) -> Result<Tensor> {
    volume.crop(record.offset, record.original)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_foreground_maps_to_unit_range() {
        let v = Tensor::from_fn(&[1, 10, 10, 10], |i| 10.0 + 10.0 * i as f32 / 999.0);
        let (n, w) = normalize(&v).unwrap();
        assert!(!w[0].degenerate);
        let (lo, hi) = n.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(n.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_volume_is_degenerate() {
        let (n, w) = normalize(&Tensor::zeros(&[2, 3, 3, 3])).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        assert!(w.iter().all(|c| c.degenerate));
        let (n, w) = normalize(&Tensor::full(&[1, 2, 2, 2], 3.0)).unwrap();
        assert!(w[0].degenerate && n.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn percentiles_match_sorting_oracle_and_outliers_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vals: Vec<f32> = (0..1000).map(|_| rng.gen_range(1.0..2.0)).collect();
        vals[17] = 1e6;
        vals[400] = -1e6;
        let v = Tensor::new(vec![1, 10, 10, 10], vals.clone()).unwrap();
        let (n, w) = normalize(&v).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // nearest rank: ceil(0.01·1000) = 10, ceil(0.99·1000) = 990
        assert_eq!(w[0].low, sorted[9]);
        assert_eq!(w[0].high, sorted[989]);
        assert_eq!(n.data()[17], 1.0);
        assert_eq!(n.data()[400], 0.0);
    }

    #[test]
    fn background_stays_zero() {
        let v = Tensor::from_fn(&[1, 4, 4, 4], |i| if i % 3 == 0 { 0.0 } else { i as f32 });
        let (n, _) = normalize(&v).unwrap();
        for (a, b) in v.data().iter().zip(n.data()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            }
        }
    }

    #[test]
    fn idempotent_on_normalized_foreground() {
        // foreground already spanning (0, 1]: 1st percentile ~1e-7, 99th is 1
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut vals: Vec<f32> = (0..1000).map(|_| rng.gen_range(0.0..1.0f32).max(1e-3)).collect();
        for (k, v) in vals.iter_mut().take(30).enumerate() {
            *v = (k + 1) as f32 * 1e-8;
        }
        for v in vals.iter_mut().skip(980) {
            *v = 1.0;
        }
        let v = Tensor::new(vec![1, 10, 10, 10], vals).unwrap();
        let (once, _) = normalize(&v).unwrap();
        let (twice, _) = normalize(&once).unwrap();
        assert!(once.max_abs_diff(&v) < 1e-6);
        assert!(twice.max_abs_diff(&once) < 1e-6);
    }

    #[test]
    fn padding() {
        let v = Tensor::from_fn(&[1, 30, 31, 32], |i| i as f32 + 1.0);
        let (p, rec) = pad_to_multiple(&v, 32).unwrap();
        assert_eq!(p.extents(), [32, 32, 32]);
        assert_eq!(rec.offset, [1, 0, 0]);
        assert_eq!(crop_back(&p, &rec).unwrap(), v);
        let (same, rec) = pad_to_multiple(&p, 32).unwrap();
        assert_eq!(same, p);
        assert_eq!(rec.offset, [0; 3]);
        let (big, _) = pad_to_multiple(&Tensor::zeros(&[1, 240, 240, 155]), 256).unwrap();
        assert_eq!(big.extents(), [256, 256, 256]);
        assert!(pad_to_multiple(&v, 0).is_err());
    }
}
