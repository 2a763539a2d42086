use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voldiff::optim::AdamWConfig;
use voldiff::patching::COORD_CHANNELS;
use voldiff::pipeline::{Mode, TrainerConfig};
use voldiff::schedule::ScheduleConfig;
use voldiff::unet::UNetConfig;

/// Everything a command needs. Every field has a default, so an empty file
/// is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub mode: Mode,
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            mode: Mode::PatchDdm,
            run_dir: "runs/default".into(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Network shape; channel counts follow from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub width_multiplier: f64,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub kernel_size: usize,
    pub norm_groups: usize,
    pub output_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self {
            base_width: 8,
            width_multiplier: u.width_multiplier,
            channel_multipliers: u.channel_multipliers,
            blocks_per_level: u.blocks_per_level,
            kernel_size: u.kernel_size,
            norm_groups: u.norm_groups,
            output_norm: u.output_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub n_cases: usize,
    pub extent: usize,
    pub modalities: usize,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data/synthetic".into(),
            n_cases: 100,
            extent: 32,
            modalities: 2,
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_extent: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Validation and checkpoint cadence in optimizer steps.
    pub eval_every: u64,
    /// DDIM steps used for validation samples.
    pub eval_sampling_steps: usize,
    /// Cap on validation cases per evaluation (0 = all).
    pub eval_cases: usize,
    /// Decay of the weight moving average used for sampling (0 = off).
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_extent: 16,
            lr: 1e-4,
            weight_decay: AdamWConfig::default().weight_decay,
            batch_size: 1,
            steps: 5000,
            eval_every: 500,
            eval_sampling_steps: 20,
            eval_cases: 0,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: Vec<usize>,
    pub ensemble_sizes: Vec<usize>,
    /// Member `i` starts from the noise drawn with `seed + i`.
    pub seed: u64,
    pub split: String,
    /// Cap on cases (0 = all in the split).
    pub max_cases: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: vec![20],
            ensemble_sizes: vec![1],
            seed: 1000,
            split: "test".into(),
            max_cases: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub extent: usize,
    pub patch_extent: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            extent: 32,
            patch_extent: 16,
            repeats: 3,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key.path=value` overrides and
    /// deserializes, rejecting unknown keys.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table).try_into().context("invalid run config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet().validate()?;
        if self.data.modalities == 0 {
            bail!("data.modalities must be positive");
        }
        if self.sample.steps.iter().any(|&s| s == 0) || self.sample.ensemble_sizes.iter().any(|&e| e == 0) {
            bail!("sample.steps and sample.ensemble_sizes must be positive");
        }
        if self.train.eval_every == 0 {
            bail!("train.eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            bail!("train.ema_decay must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        let m = &self.model;
        UNetConfig {
            in_channels: 1 + self.data.modalities + COORD_CHANNELS,
            out_channels: 1,
            base_width: m.base_width,
            width_multiplier: m.width_multiplier,
            channel_multipliers: m.channel_multipliers.clone(),
            blocks_per_level: m.blocks_per_level,
            kernel_size: m.kernel_size,
            norm_groups: m.norm_groups,
            output_norm: m.output_norm,
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            mode: self.mode,
            patch_extent: self.train.patch_extent,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            optimizer: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                ..AdamWConfig::default()
            },
            ema_decay: (self.train.ema_decay > 0.0).then_some(self.train.ema_decay),
        }
    }
}

/// `a.b.c=value`; the value is parsed as TOML and kept as a string when it
/// does not parse (so `mode=halfres` works unquoted).
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not key=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::load(None, &[]).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train.lr, 1e-4);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::load(
            None,
            &[
                "mode=halfres".into(),
                "train.steps=12".into(),
                "model.channel_multipliers=[1, 2]".into(),
                "data.dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.mode, Mode::HalfRes);
        assert_eq!(c.train.steps, 12);
        assert_eq!(c.model.channel_multipliers, vec![1, 2]);
        assert_eq!(c.data.dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["train.stepz=3".into()]).is_err());
        assert!(RunConfig::load(None, &["colour=3".into()]).is_err());
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let mut c = RunConfig::default();
        c.train.steps = 77;
        fs::write(&p, toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), c);
    }

    #[test]
    fn channel_count_follows_modalities() {
        let mut c = RunConfig::default();
        c.data.modalities = 4;
        assert_eq!(c.unet().in_channels, 8);
    }
}
