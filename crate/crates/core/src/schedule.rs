//! Variance schedule, forward noising and the deterministic DDIM step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{kernels, Real, Tensor};

/// How the schedule is built; serialized into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    /// β at t = 1.
    pub beta_start: f64,
    /// β at t = T.
    pub beta_end: f64,
    /// Ignore the endpoint order and let β increase with t.
    pub ascending: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 0.02,
            beta_end: 1e-4,
            ascending: false,
        }
    }
}

/// Linear β schedule with cached cumulative products.
///
/// Timesteps run `1..=T`; index 0 of the `alpha_bar` table holds the empty
/// product 1 so the last DDIM transition lands on the clean estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
}

pub fn build_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig {
        timesteps,
        beta_start,
        beta_end,
        ascending: false,
    })
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t_max = config.timesteps;
        if t_max == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        for b in [config.beta_start, config.beta_end] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("beta endpoints must lie in (0, 1), got {b}")));
            }
        }
        let (first, last) = if config.ascending {
            (config.beta_start.min(config.beta_end), config.beta_start.max(config.beta_end))
        } else {
            (config.beta_start, config.beta_end)
        };
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    first
                } else {
                    first + (last - first) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for &b in &betas {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            config,
            betas,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    /// β_t for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
    pub fn forward_noise<T: Real>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let (a, b) = (self.sqrt_alpha_bar[t], self.sqrt_one_minus_alpha_bar[t]);
        x0.zip_map(eps, "forward_noise", |x, e| T::from_f64(a * x.as_f64() + b * e.as_f64()))
    }

    /// Clean estimate implied by a noise prediction.
    pub fn predict_x0<T: Real>(&self, x_t: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let (a, b) = (self.sqrt_alpha_bar[t], self.sqrt_one_minus_alpha_bar[t]);
        x_t.zip_map(eps, "predict_x0", |x, e| T::from_f64((x.as_f64() - b * e.as_f64()) / a))
    }

    /// Deterministic DDIM transition from `t` to `t_prev < t`.
    pub fn ddim_step<T: Real>(&self, x_t: &Tensor<T>, eps_pred: &Tensor<T>, t: usize, t_prev: usize) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::TimestepOrder { t, t_prev });
        }
        let (a, b) = (self.sqrt_alpha_bar[t], self.sqrt_one_minus_alpha_bar[t]);
        let (a_prev, b_prev) = (self.sqrt_alpha_bar[t_prev], self.sqrt_one_minus_alpha_bar[t_prev]);
        x_t.zip_map(eps_pred, "ddim_step", |x, e| {
            let (x, e) = (x.as_f64(), e.as_f64());
            let x0 = (x - b * e) / a;
            T::from_f64(a_prev * x0 + b_prev * e)
        })
    }
}

/// Mean of squared differences between the true and predicted noise.
pub fn mse_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<f32> {
    kernels::mse_forward(eps_pred, eps_true)
}

/// Decreasing timesteps visited during sampling; each one transitions to the
/// next entry and the last one to `t = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StridePlan {
    timesteps: Vec<usize>,
}

/// Evenly spaced plan: `floor(i·T/n)` for `i = n, …, 1`.
pub fn make_stride_plan(timesteps: usize, num_steps: usize) -> Result<StridePlan> {
    if num_steps == 0 || num_steps > timesteps {
        return Err(invalid(format!(
            "number of sampling steps must be in 1..={timesteps}, got {num_steps}"
        )));
    }
    let steps = (1..=num_steps).rev().map(|i| i * timesteps / num_steps).collect();
    Ok(StridePlan { timesteps: steps })
}

impl StridePlan {
    pub fn from_timesteps(timesteps: Vec<usize>, t_max: usize) -> Result<Self> {
        let ok = !timesteps.is_empty()
            && timesteps[0] <= t_max
            && *timesteps.last().expect("non-empty") >= 1
            && timesteps.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(invalid(format!("stride plan must be strictly decreasing within 1..={t_max}")));
        }
        Ok(Self { timesteps })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// `(t, t_prev)` pairs in sampling order, ending with `(τ_1, 0)`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }
}
