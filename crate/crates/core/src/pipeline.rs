//! Segmentation by diffusion: training steps for the three modes, DDIM
//! sampling over the whole volume and ensembling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::checkpoint::{Checkpoint, RngState};
use crate::metrics::{dice, hd95, BinaryMask};
use crate::optim::{adamw_step, AdamWConfig, AdamWState, ParamMap};
use crate::patching::{build_coordinate_grid, extract_training_patch, CenterWeightedSampler, ChannelLayout, PatchSpec};
use crate::schedule::{NoiseSchedule, ScheduleConfig, StridePlan};
use crate::tensor::{kernels, Eager, Graph, Tensor};
use crate::unet::{build_model, ModelParams, UNet, UNetConfig};

pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Coordinate-encoded patches for training, whole volume for inference.
    PatchDdm,
    FullRes,
    /// Everything at half resolution, output upsampled.
    HalfRes,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::PatchDdm, Mode::FullRes, Mode::HalfRes];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PatchDdm => "patchddm",
            Mode::FullRes => "fullres",
            Mode::HalfRes => "halfres",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown mode `{s}` (expected patchddm, fullres or halfres)")))
    }
}

/// `[x0 | condition | CE]` at the resolution the network sees in `mode`.
/// The coordinate channels are attached to the full volume before any
/// downsampling or cropping.
pub fn prepare_source(x0: &Tensor, condition: &Tensor, mode: Mode) -> Result<Tensor> {
    if x0.channels() != 1 {
        return Err(invalid(format!("mask must have one channel, got {}", x0.channels())));
    }
    let coords = build_coordinate_grid(x0.extents())?;
    let full = ChannelLayout::new(condition.channels()).assemble(x0, condition, &coords)?;
    match mode {
        Mode::HalfRes => kernels::downsample_avg_forward(&full, 2),
        _ => Ok(full),
    }
}

/// Result of one denoising-loss evaluation.
pub struct StepOutcome {
    pub loss: f32,
    pub t: usize,
    pub input_extents: [usize; 3],
    pub grads: ParamMap,
}

/// Draws `t`, a patch position (PatchDDM only) and `ε`, builds
/// `[x_t | condition | CE]` and returns the noise-prediction loss with its
/// parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    net: &UNet,
    params: &ParamMap,
    schedule: &NoiseSchedule,
    source: &Tensor,
    mode: Mode,
    patch_extent: [usize; 3],
    sampler: &mut CenterWeightedSampler,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let layout = ChannelLayout::new(source.channels() - 1 - crate::patching::COORD_CHANNELS);
    let t = rng.gen_range(1..=schedule.timesteps());
    let window = match mode {
        Mode::PatchDdm => {
            let spec = PatchSpec::from_center(sampler.sample_center(), source.extents(), patch_extent)?;
            extract_training_patch(source, &spec)?
        }
        _ => source.clone(),
    };
    let (x0, condition, coords) = layout.split(&window)?;
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = schedule.forward_noise(&x0, t, &eps)?;
    let input = layout.assemble(&x_t, &condition, &coords)?;

    let mut g = Graph::<f32>::new();
    let bound = net.bind(&mut g, params, true);
    let xv = g.leaf(input, false);
    let target = g.leaf(eps, false);
    let pred = net.forward(&mut g, &bound, &xv, t)?;
    let loss = g.mse_loss(pred, target)?;
    let mut grads = g.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(k, v)| (k.clone(), grads.take(*v).unwrap_or_else(|| Tensor::zeros(params[k].shape()))))
        .collect();
    Ok(StepOutcome {
        loss: g.get(loss).item(),
        t,
        input_extents: window.extents(),
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub patch_extent: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Keep an exponential moving average of the weights with this decay
    /// and sample from it.
    pub ema_decay: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PatchDdm,
            patch_extent: 16,
            batch_size: 1,
            seed: 0,
            optimizer: AdamWConfig {
                lr: 1e-4,
                ..Default::default()
            },
            ema_decay: None,
        }
    }
}

/// Model, optimizer and random streams of one training run.
pub struct Trainer {
    pub config: TrainerConfig,
    pub model: ModelParams,
    pub schedule: NoiseSchedule,
    net: UNet,
    state: AdamWState,
    ema: Option<ParamMap>,
    rng: ChaCha8Rng,
    sampler: CenterWeightedSampler,
    step: u64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(config: TrainerConfig, unet: &UNetConfig, schedule: ScheduleConfig) -> Result<Self> {
        let model = build_model(unet, config.seed)?;
        let state = AdamWState::new(&model.tensors);
        let ema = config.ema_decay.map(|_| model.tensors.clone());
        let (rng, patch) = (stream(config.seed, 1), stream(config.seed, 2));
        Self::assemble(config, model, schedule, state, ema, rng, patch, 0)
    }

    fn assemble(
        config: TrainerConfig,
        model: ModelParams,
        schedule: ScheduleConfig,
        state: AdamWState,
        ema: Option<ParamMap>,
        rng: ChaCha8Rng,
        sampler_rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let factor = model.config.downsampling_factor();
        if config.mode == Mode::PatchDdm && (config.patch_extent == 0 || config.patch_extent % factor != 0) {
            return Err(Error::InvalidConfig(format!(
                "patch extent {} must be a positive multiple of {factor}",
                config.patch_extent
            )));
        }
        let decay = config.ema_decay;
        let mut trainer = Self {
            net: model.network()?,
            schedule: NoiseSchedule::new(schedule)?,
            config,
            model,
            state,
            ema,
            rng,
            sampler: CenterWeightedSampler::from_rng(sampler_rng),
            step,
        };
        trainer.set_ema_decay(decay)?;
        Ok(trainer)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn network(&self) -> &UNet {
        &self.net
    }

    /// Switches averaging on, off or to another decay; a newly started
    /// average begins at the current weights.
    pub fn set_ema_decay(&mut self, decay: Option<f64>) -> Result<()> {
        if let Some(d) = decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidConfig(format!("ema_decay must lie in [0, 1), got {d}")));
            }
        }
        self.config.ema_decay = decay;
        self.ema = match decay {
            Some(_) => Some(self.ema.take().unwrap_or_else(|| self.model.tensors.clone())),
            None => None,
        };
        Ok(())
    }

    /// Weights used for sampling: the moving average when one is kept.
    pub fn inference_model(&self) -> ModelParams {
        ModelParams {
            config: self.model.config.clone(),
            tensors: self.ema.clone().unwrap_or_else(|| self.model.tensors.clone()),
        }
    }

    /// One optimizer update on `batch_size` draws from `sources`
    /// (outputs of [`prepare_source`]); returns the mean loss.
    pub fn train_step(&mut self, sources: &[Tensor]) -> Result<f32> {
        if sources.is_empty() {
            return Err(invalid("no training cases"));
        }
        let patch = [self.config.patch_extent; 3];
        let mut total: Option<ParamMap> = None;
        let mut loss = 0.0f64;
        for _ in 0..self.config.batch_size {
            let idx = self.rng.gen_range(0..sources.len());
            let out = training_step(
                &self.net,
                &self.model.tensors,
                &self.schedule,
                &sources[idx],
                self.config.mode,
                patch,
                &mut self.sampler,
                &mut self.rng,
            )?;
            loss += out.loss as f64;
            match &mut total {
                None => total = Some(out.grads),
                Some(acc) => {
                    for (k, g) in out.grads {
                        let a = acc.get_mut(&k).expect("same parameter set");
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = total.expect("batch_size > 0");
        let scale = 1.0 / self.config.batch_size as f32;
        if self.config.batch_size > 1 {
            grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
        }
        adamw_step(&mut self.model.tensors, &grads, &mut self.state, &self.config.optimizer)?;
        self.step += 1;
        if let (Some(avg), Some(decay)) = (&mut self.ema, self.config.ema_decay) {
            // warm-up so early averages are not dominated by the initialization
            let n = self.state.step as f64;
            let d = decay.min((1.0 + n) / (10.0 + n)) as f32;
            for (k, p) in &self.model.tensors {
                let a = avg.get_mut(k).expect("same parameter set");
                a.data_mut().iter_mut().zip(p.data()).for_each(|(a, p)| *a = d * *a + (1.0 - d) * p);
            }
        }
        Ok((loss / self.config.batch_size as f64) as f32)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut extra: std::collections::BTreeMap<String, String> = [
            ("mode".to_string(), c.mode.to_string()),
            ("patch_extent".to_string(), c.patch_extent.to_string()),
            ("batch_size".to_string(), c.batch_size.to_string()),
            ("seed".to_string(), c.seed.to_string()),
        ]
        .into();
        if let Some(d) = c.ema_decay {
            extra.insert("ema_decay".to_string(), d.to_string());
        }
        Checkpoint {
            model: self.model.clone(),
            schedule: *self.schedule.config(),
            optimizer: c.optimizer,
            optimizer_state: self.state.clone(),
            rng: [
                ("train".to_string(), RngState::capture(&self.rng)),
                ("patch".to_string(), RngState::capture(self.sampler.rng())),
            ]
            .into(),
            step: self.step,
            extra,
            ema: self.ema.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))
        };
        let parse = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint field `{k}` is not an integer")))
        };
        let config = TrainerConfig {
            mode: get("mode")?.parse()?,
            patch_extent: parse("patch_extent")? as usize,
            batch_size: parse("batch_size")? as usize,
            seed: parse("seed")?,
            optimizer: ckpt.optimizer,
            ema_decay: match ckpt.extra.get("ema_decay") {
                Some(v) => Some(
                    v.parse()
                        .map_err(|_| Error::Format(format!("checkpoint field `ema_decay` is not a number: {v}")))?,
                ),
                None => None,
            },
        };
        let rng = |k: &str| {
            ckpt.rng
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks rng `{k}`")))
                .and_then(RngState::restore)
        };
        ckpt.model.validate()?;
        let (train, patch) = (rng("train")?, rng("patch")?);
        Self::assemble(config, ckpt.model, ckpt.schedule, ckpt.optimizer_state, ckpt.ema, train, patch, ckpt.step)
    }
}

/// Deterministic DDIM chain from `x_t` along `plan`, conditioning on the
/// fixed `[condition | CE]` channels. Returns the raw clean-space estimate.
pub fn ddim_sample(
    net: &UNet,
    params: &ParamMap,
    schedule: &NoiseSchedule,
    condition_and_coords: &Tensor,
    mut x_t: Tensor,
    plan: &StridePlan,
) -> Result<Tensor> {
    if plan.timesteps().first().is_some_and(|&t| t > schedule.timesteps()) {
        return Err(invalid("stride plan exceeds the schedule length"));
    }
    let mut e = Eager::<f32>::new();
    let bound = net.bind(&mut e, params, false);
    for (t, t_prev) in plan.transitions() {
        let input = Tensor::concat_channels(&[&x_t, condition_and_coords])?;
        let eps = net.forward(&mut e, &bound, &input, t)?;
        x_t = schedule.ddim_step(&x_t, &eps, t, t_prev)?;
    }
    Ok(x_t)
}

/// Condition channels plus coordinates at the resolution used in `mode`.
pub fn inference_condition(condition: &Tensor, mode: Mode) -> Result<Tensor> {
    condition.expect_volume("inference condition")?;
    let coords = build_coordinate_grid(condition.extents())?;
    let joined = Tensor::concat_channels(&[condition, &coords])?;
    match mode {
        Mode::HalfRes => kernels::downsample_avg_forward(&joined, 2),
        _ => Ok(joined),
    }
}

/// Initial noise for a given seed, at the network resolution.
pub fn initial_noise(extents: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[1, extents[0], extents[1], extents[2]], &mut rng)
}

/// Whole-volume segmentation from the noise drawn with `seed`; the result
/// is clamped to `[0, 1]` (threshold with [`binarize`]).
pub fn sample_segmentation(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    condition: &Tensor,
    plan: &StridePlan,
    seed: u64,
    mode: Mode,
) -> Result<Tensor> {
    let net = params.network()?;
    let cond = inference_condition(condition, mode)?;
    let x_t = initial_noise(cond.extents(), seed);
    let out = ddim_sample(&net, &params.tensors, schedule, &cond, x_t, plan)?;
    let out = match mode {
        Mode::HalfRes => kernels::upsample_nearest_forward(&out, 2)?,
        _ => out,
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

pub fn binarize(soft: &Tensor) -> Result<BinaryMask> {
    BinaryMask::from_volume(soft, THRESHOLD)
}

/// Dice and HD95 of a prediction against a reference mask; HD95 is `None`
/// when either mask is empty.
pub fn score(prediction: &BinaryMask, reference: &BinaryMask) -> Result<(f64, Option<f64>)> {
    let d = dice(prediction, reference)?;
    let h = match hd95(prediction, reference) {
        Ok(v) => Some(v),
        Err(Error::UndefinedDistance) => None,
        Err(e) => return Err(e),
    };
    Ok((d, h))
}

/// Per-voxel statistics over repeated segmentations.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub members: Vec<Tensor>,
    pub mean: Tensor,
    /// Variance divided by its maximum (all zero when the members agree).
    pub variance: Tensor,
    pub consensus: BinaryMask,
}

pub fn aggregate(members: Vec<Tensor>) -> Result<EnsembleResult> {
    let first = members.first().ok_or_else(|| invalid("ensemble needs at least one member"))?;
    for m in &members[1..] {
        first.expect_same_shape(m, "ensemble")?;
    }
    let n = members.len() as f64;
    let len = first.len();
    let mut mean = vec![0.0f64; len];
    for m in &members {
        for (a, &v) in mean.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0f64; len];
    for m in &members {
        for ((s, &v), mu) in var.iter_mut().zip(m.data()).zip(&mean) {
            *s += (v as f64 - mu).powi(2);
        }
    }
    let max = var.iter().cloned().fold(0.0, f64::max);
    let shape = first.shape().to_vec();
    let variance = Tensor::new(
        shape.clone(),
        var.iter().map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect(),
    )?;
    let mean = Tensor::new(shape, mean.iter().map(|&v| v as f32).collect())?;
    let consensus = binarize(&mean)?;
    Ok(EnsembleResult {
        members,
        mean,
        variance,
        consensus,
    })
}

pub fn ensemble(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    condition: &Tensor,
    plan: &StridePlan,
    seeds: &[u64],
    mode: Mode,
) -> Result<EnsembleResult> {
    if seeds.is_empty() {
        return Err(invalid("ensemble needs at least one seed"));
    }
    let members = seeds
        .iter()
        .map(|&s| sample_segmentation(params, schedule, condition, plan, s, mode))
        .collect::<Result<Vec<_>>>()?;
    aggregate(members)
}
