use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::normalize::normalize;
use crate::io::volume::{read_volume, write_volume, VolumeMeta};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One generated subject: normalized condition channels and a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub id: String,
    pub split: Split,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub modalities: usize,
    /// Head radius as a fraction of the extent.
    pub head_radius: f64,
    /// Lesion semi-axis range as fractions of the extent.
    pub lesion_radius: [f64; 2],
    pub max_lesions: usize,
    /// Additive lesion contrast per modality, cycled when there are more
    /// modalities than entries.
    pub lesion_shift: Vec<f64>,
    pub texture_std: f64,
    pub voxel_noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            modalities: 2,
            head_radius: 0.44,
            lesion_radius: [0.1, 0.2],
            max_lesions: 3,
            lesion_shift: vec![0.35, 0.25],
            texture_std: 0.08,
            voxel_noise_std: 0.03,
        }
    }
}

/// Split sizes by largest remainder so they always sum to `n`.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions must be in [0, 1] and sum to 1, got {fractions:?}")));
    }
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = raw[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

fn box_blur_axis(data: &mut [f32], ext: [usize; 3], axis: usize) {
    let [d, h, w] = ext;
    let strides = [h * w, w, 1];
    let (n, stride) = (ext[axis], strides[axis]);
    let src = data.to_vec();
    for i in 0..d * h * w {
        let pos = (i / stride) % n;
        let (lo, hi) = (pos.saturating_sub(1), (pos + 1).min(n - 1));
        let base = i - pos * stride;
        let sum: f32 = (lo..=hi).map(|p| src[base + p * stride]).sum();
        data[i] = sum / (hi - lo + 1) as f32;
    }
}

/// Gaussian noise smoothed by repeated 3-voxel box filters, rescaled to
/// unit standard deviation.
fn smooth_noise(rng: &mut ChaCha8Rng, ext: [usize; 3]) -> Vec<f32> {
    let n = ext.iter().product();
    let mut v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    for _ in 0..2 {
        for axis in 0..3 {
            box_blur_axis(&mut v, ext, axis);
        }
    }
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let std = (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    v.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect()
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn generate_case(index: usize, extent: usize, seed: u64, cfg: &SyntheticConfig) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let s = extent as f64;
    let ext = [extent; 3];
    let mid = (s - 1.0) / 2.0;
    let head_c = [0; 3].map(|_: i32| mid + rng.gen_range(-1.0..=1.0));
    let head_r = cfg.head_radius * s;

    let jitter = Normal::new(0.0, 0.1 * s).expect("positive std");
    let n_lesions = rng.gen_range(1..=cfg.max_lesions.max(1));
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let mut accepted = None;
        for _ in 0..100 {
            let radii = [0; 3].map(|_: i32| rng.gen_range(cfg.lesion_radius[0]..=cfg.lesion_radius[1]) * s);
            let center = [0; 3].map(|_: i32| mid + jitter.sample(&mut rng));
            let dist = (0..3).map(|a| (center[a] - head_c[a]).powi(2)).sum::<f64>().sqrt();
            let reach = radii.iter().cloned().fold(0.0, f64::max);
            if dist + reach <= head_r - 1.0 {
                accepted = Some(Ellipsoid { center, radii });
                break;
            }
        }
        // fall back to a centred lesion if every draw overhung the head
        lesions.push(accepted.unwrap_or(Ellipsoid {
            center: head_c,
            radii: [cfg.lesion_radius[0] * s; 3],
        }));
    }

    let n = extent.pow(3);
    let mut mask = vec![0.0f32; n];
    let mut head = vec![false; n];
    for i in 0..n {
        let p = [(i / (extent * extent)) as f64, ((i / extent) % extent) as f64, (i % extent) as f64];
        head[i] = (0..3).map(|a| (p[a] - head_c[a]).powi(2)).sum::<f64>() <= head_r * head_r;
        if lesions.iter().any(|e| e.contains(p)) {
            mask[i] = 1.0;
        }
    }
    if !mask.iter().any(|&m| m > 0.0) {
        return Err(Error::InvalidConfig("lesion radius too small for the extent".into()));
    }

    let noise = Normal::new(0.0, cfg.voxel_noise_std.max(1e-12)).expect("positive std");
    let mut image = Tensor::zeros_volume(cfg.modalities, ext);
    for m in 0..cfg.modalities {
        let texture = smooth_noise(&mut rng, ext);
        let shift = cfg.lesion_shift[m % cfg.lesion_shift.len().max(1)];
        let base = 0.45 + 0.05 * m as f64;
        let ch = image.channel_mut(m);
        for i in 0..n {
            if !head[i] {
                continue;
            }
            let v = base + cfg.texture_std * texture[i] as f64 + noise.sample(&mut rng) + shift * mask[i] as f64;
            ch[i] = v.max(0.01) as f32;
        }
    }
    let (image, _) = normalize(&image)?;
    Ok((image, Tensor::new(vec![1, extent, extent, extent], mask)?))
}

/// Deterministic synthetic dataset; cases are assigned to splits in order.
pub fn generate_dataset(n_cases: usize, extent: usize, seed: u64, fractions: [f64; 3]) -> Result<Vec<SyntheticCase>> {
    generate_dataset_with(n_cases, extent, seed, fractions, &SyntheticConfig::default())
}

pub fn generate_dataset_with(
    n_cases: usize,
    extent: usize,
    seed: u64,
    fractions: [f64; 3],
    cfg: &SyntheticConfig,
) -> Result<Vec<SyntheticCase>> {
    if n_cases < 3 {
        return Err(invalid("at least three cases are required"));
    }
    if extent < 8 {
        return Err(invalid("synthetic volumes need an extent of at least 8"));
    }
    if cfg.modalities == 0 || cfg.lesion_shift.is_empty() {
        return Err(Error::InvalidConfig("need at least one modality and lesion shift".into()));
    }
    let counts = split_counts(n_cases, fractions)?;
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut out = Vec::with_capacity(n_cases);
    let mut index = 0;
    for (split, &count) in splits.iter().zip(&counts) {
        for _ in 0..count {
            let (image, mask) = generate_case(index, extent, seed, cfg)?;
            out.push(SyntheticCase {
                id: format!("case-{index:04}"),
                split: *split,
                image,
                mask,
            });
            index += 1;
        }
    }
    Ok(out)
}

pub const DATASET_FORMAT: &str = "voldiff-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub extent: usize,
    pub modalities: usize,
    pub fractions: [f64; 3],
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

/// Writes every case as volume files under `dir/cases` plus `dir/manifest.json`.
pub fn write_dataset(dir: &Path, cases: &[SyntheticCase], seed: u64, fractions: [f64; 3]) -> Result<Manifest> {
    let first = cases.first().ok_or_else(|| invalid("empty dataset"))?;
    let modalities = first.image.channels();
    let names: Vec<String> = (0..modalities).map(|m| format!("modality{m}")).collect();
    let image_meta = VolumeMeta {
        channel_names: names,
        spacing: [1.0; 3],
        value_range: "[0, 1], background 0".into(),
    };
    let mask_meta = VolumeMeta::named(&["mask"], "{0, 1}");
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        let image = format!("cases/{}.image", c.id);
        let mask = format!("cases/{}.mask", c.id);
        write_volume(&dir.join(&image), &c.image, &image_meta)?;
        write_volume(&dir.join(&mask), &c.mask, &mask_meta)?;
        entries.push(CaseEntry {
            id: c.id.clone(),
            split: c.split,
            image: format!("{image}.vol.json"),
            mask: format!("{mask}.vol.json"),
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed,
        extent: first.image.extents()[0],
        modalities,
        fractions,
        cases: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unexpected dataset format {}", m.format)));
    }
    if m.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: m.version,
            expected: DATASET_VERSION,
        });
    }
    Ok(m)
}

pub fn load_case(dir: &Path, entry: &CaseEntry) -> Result<SyntheticCase> {
    let (image, _) = read_volume(&dir.join(&entry.image))?;
    let (mask, _) = read_volume(&dir.join(&entry.mask))?;
    if image.extents() != mask.extents() {
        return Err(Error::ShapeMismatch {
            op: "load_case",
            left: image.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    Ok(SyntheticCase {
        id: entry.id.clone(),
        split: entry.split,
        image,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{dice, BinaryMask};

    #[test]
    fn paper_split() {
        assert_eq!(split_counts(100, [0.8, 0.1, 0.1]).unwrap(), [80, 10, 10]);
        assert_eq!(split_counts(7, [0.8, 0.1, 0.1]).unwrap().iter().sum::<usize>(), 7);
        assert_eq!(split_counts(3, [1.0 / 3.0; 3]).unwrap(), [1, 1, 1]);
        assert!(split_counts(10, [0.5, 0.5, 0.5]).is_err());
        assert!(split_counts(10, [1.2, -0.1, -0.1]).is_err());
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_dataset(5, 16, 9, [0.6, 0.2, 0.2]).unwrap();
        let b = generate_dataset(5, 16, 9, [0.6, 0.2, 0.2]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(5, 16, 10, [0.6, 0.2, 0.2]).unwrap());
        for c in &a {
            let m = BinaryMask::from_volume(&c.mask, 0.5).unwrap();
            assert!(m.count() > 0);
            assert_eq!(dice(&m, &m).unwrap(), 1.0);
            assert!(c.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(c.image.channels(), 2);
            assert!(c.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // background outside the head is exactly zero
            assert_eq!(c.image.data()[0], 0.0);
        }
        let splits: Vec<Split> = a.iter().map(|c| c.split).collect();
        assert_eq!(splits, vec![Split::Train, Split::Train, Split::Train, Split::Val, Split::Test]);
        assert!(generate_dataset(2, 16, 0, [0.8, 0.1, 0.1]).is_err());
    }

    #[test]
    fn lesions_are_brighter() {
        let cases = generate_dataset(3, 24, 1, [1.0, 0.0, 0.0]).unwrap();
        for c in &cases {
            for m in 0..2 {
                let (mut inside, mut outside, mut ni, mut no) = (0.0, 0.0, 0, 0);
                for (v, k) in c.image.channel(m).iter().zip(c.mask.data()) {
                    if *v == 0.0 {
                        continue;
                    }
                    if *k > 0.5 {
                        inside += *v as f64;
                        ni += 1;
                    } else {
                        outside += *v as f64;
                        no += 1;
                    }
                }
                assert!(inside / ni as f64 > outside / no as f64 + 0.2);
            }
        }
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cases = generate_dataset(4, 8, 2, [0.5, 0.25, 0.25]).unwrap();
        let m = write_dataset(dir.path(), &cases, 2, [0.5, 0.25, 0.25]).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        assert_eq!(m.split(Split::Train).count(), 2);
        for (entry, case) in m.cases.iter().zip(&cases) {
            assert_eq!(&load_case(dir.path(), entry).unwrap(), case);
        }
    }
}
