//! 3D U-Net denoiser with averaging skip connections.
//!
//! The network is described once by a [`Layout`] derived from the
//! configuration. Parameter construction, the forward pass and the analytic
//! cost model all walk that same layout.

mod cost;
mod layout;
mod model;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamMap;
use crate::tensor::Tensor;

pub use cost::{count_flops_and_peak_memory, CostReport};
pub use layout::{Layout, ResBlockSpec};
pub use model::{timestep_embedding, UNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Noisy mask + condition channels + 3 coordinate channels.
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub width_multiplier: f64,
    /// One entry per resolution level.
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    /// Odd cubic kernel size for the residual convolutions.
    pub kernel_size: usize,
    /// Upper bound on GroupNorm groups; each layer uses the largest divisor
    /// of its width not exceeding this.
    pub norm_groups: usize,
    /// GroupNorm before the output convolution. Off by default: it removes
    /// the volume-wide mean of every channel group, which the noise
    /// prediction then cannot reproduce.
    pub output_norm: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            out_channels: 1,
            base_width: 16,
            width_multiplier: 1.0,
            channel_multipliers: vec![1, 2, 2],
            blocks_per_level: 2,
            kernel_size: 3,
            norm_groups: 8,
            output_norm: false,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    /// Channel width at each level after applying the width multiplier.
    pub fn widths(&self) -> Result<Vec<usize>> {
        self.channel_multipliers
            .iter()
            .map(|&m| {
                let w = (self.base_width as f64 * self.width_multiplier * m as f64).round();
                if w < 1.0 {
                    Err(Error::InvalidConfig(format!(
                        "level width rounds to zero (base {} x {} x {m})",
                        self.base_width, self.width_multiplier
                    )))
                } else {
                    Ok(w as usize)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.levels() == 0 {
            return bad("at least one level is required");
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("input and output channel counts must be positive");
        }
        if self.blocks_per_level == 0 {
            return bad("blocks_per_level must be positive");
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive");
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad("width_multiplier must be positive");
        }
        self.widths().map(|_| ())
    }
}

/// Learnable tensors of one network together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: UNetConfig,
    pub tensors: ParamMap,
}

/// Deterministic initialization: Kaiming-normal conv kernels, fan-in scaled
/// linear weights, unit norm gains, zero biases and a zero output layer.
pub fn build_model(config: &UNetConfig, seed: u64) -> Result<ModelParams> {
    let layout = Layout::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in layout.parameter_shapes() {
        let t = if name.starts_with("out.conv") || name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let gain = if shape.len() == 5 { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    pub fn network(&self) -> Result<UNet> {
        UNet::new(&self.config)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that the tensor set matches the configuration exactly.
    pub fn validate(&self) -> Result<()> {
        let layout = Layout::new(&self.config)?;
        let expected = layout.parameter_shapes();
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "model parameter",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::InvalidArgument(format!("parameter {name} is not finite")));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let cfg = UNetConfig::default();
        let a = build_model(&cfg, 42).unwrap();
        let b = build_model(&cfg, 42).unwrap();
        for (k, t) in &a.tensors {
            let u = &b.tensors[k];
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_ne!(a, build_model(&cfg, 43).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn single_level_has_no_resampling() {
        let cfg = UNetConfig {
            channel_multipliers: vec![1],
            ..Default::default()
        };
        let p = build_model(&cfg, 0).unwrap();
        assert!(p.tensors.keys().all(|k| !k.starts_with("down.") && !k.starts_with("up.")));
        let deep = build_model(&UNetConfig::default(), 0).unwrap();
        assert!(deep.tensors.contains_key("down.1.weight") && deep.tensors.contains_key("up.0.weight"));
    }

    #[test]
    fn parameter_count_closed_form() {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k * k + o;
        let temb = 64;
        let block = |i: usize, o: usize| {
            conv(i, o, 3) + (o * temb + o) + 2 * o + conv(o, o, 3) + if i != o { conv(i, o, 1) } else { 0 }
        };
        let expected = conv(6, 16, 3)
            + (16 * temb + temb) + (temb * temb + temb)
            + 2 * block(16, 16) + block(16, 32) + block(32, 32) + 2 * block(32, 32)
            + block(32, 32)
            + 2 * block(16, 16) + 2 * block(32, 32) + 2 * block(32, 32)
            + conv(16, 16, 3) + conv(32, 32, 3)
            + conv(32, 16, 3) + conv(32, 32, 3)
            + conv(16, 1, 3);
        let p = build_model(&UNetConfig::default(), 1).unwrap();
        assert_eq!(p.parameter_count(), expected);
        let report = count_flops_and_peak_memory(&UNetConfig::default(), 16).unwrap();
        assert_eq!(report.parameters as usize, expected);
        let normed = UNetConfig {
            output_norm: true,
            ..Default::default()
        };
        assert_eq!(build_model(&normed, 1).unwrap().parameter_count(), expected + 2 * 16);
    }

    #[test]
    fn skip_junctions_do_not_concatenate() {
        let p = build_model(&UNetConfig::default(), 1).unwrap();
        let widths = p.config.widths().unwrap();
        for (l, w) in widths.iter().enumerate() {
            let first = &p.tensors[&format!("dec.{l}.0.conv1.weight")];
            assert_eq!(first.shape()[1], *w);
            assert!(!p.tensors.contains_key(&format!("dec.{l}.0.shortcut.weight")));
        }
    }

    #[test]
    fn output_layer_starts_at_zero() {
        let p = build_model(&UNetConfig::default(), 1).unwrap();
        assert!(p.tensors["out.conv.weight"].data().iter().all(|&v| v == 0.0));
        assert!(p.tensors["stem.weight"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = UNetConfig::default();
        cfg.channel_multipliers.clear();
        assert!(build_model(&cfg, 0).is_err());
        let cfg = UNetConfig {
            kernel_size: 2,
            ..Default::default()
        };
        assert!(build_model(&cfg, 0).is_err());
        let cfg = UNetConfig {
            base_width: 1,
            width_multiplier: 0.3,
            ..Default::default()
        };
        assert!(matches!(build_model(&cfg, 0), Err(Error::InvalidConfig(_))));
    }
}
