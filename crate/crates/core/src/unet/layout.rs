use std::collections::BTreeMap;

use crate::error::Result;
use crate::unet::UNetConfig;

/// conv → norm → SiLU → conv with the timestep embedding added after the
/// first conv, plus a 1×1 shortcut when the width changes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResBlockSpec {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl ResBlockSpec {
    pub fn has_shortcut(&self) -> bool {
        self.in_channels != self.out_channels
    }
}

/// Resolved architecture: every layer with its channel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub widths: Vec<usize>,
    /// Sinusoidal timestep features.
    pub sin_dim: usize,
    /// Width of the timestep MLP.
    pub temb_dim: usize,
    pub encoder: Vec<Vec<ResBlockSpec>>,
    pub mid: ResBlockSpec,
    /// `decoder[l]` runs after the skip junction at level `l`.
    pub decoder: Vec<Vec<ResBlockSpec>>,
    /// Groups of the optional output GroupNorm.
    pub out_groups: Option<usize>,
}

/// Largest divisor of `channels` that is at most `limit`.
pub(crate) fn groups_for(channels: usize, limit: usize) -> usize {
    (1..=limit.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl Layout {
    pub fn new(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.widths()?;
        let levels = widths.len();
        let block = |prefix: String, i: usize, o: usize| ResBlockSpec {
            prefix,
            in_channels: i,
            out_channels: o,
            groups: groups_for(o, config.norm_groups),
        };

        let mut encoder = Vec::with_capacity(levels);
        let mut ch = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let blocks = (0..config.blocks_per_level)
                .map(|b| {
                    let spec = block(format!("enc.{l}.{b}"), ch, w);
                    ch = w;
                    spec
                })
                .collect();
            encoder.push(blocks);
        }
        let bottom = widths[levels - 1];
        let mid = block("mid".to_string(), bottom, bottom);
        let decoder = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                (0..config.blocks_per_level)
                    .map(|b| block(format!("dec.{l}.{b}"), w, w))
                    .collect()
            })
            .collect();
        let sin_dim = (widths[0] + 1) / 2 * 2;
        Ok(Self {
            in_channels: config.in_channels,
            out_channels: config.out_channels,
            kernel_size: config.kernel_size,
            sin_dim: sin_dim.max(2),
            temb_dim: 4 * widths[0],
            out_groups: config.output_norm.then(|| groups_for(widths[0], config.norm_groups)),
            widths,
            encoder,
            mid,
            decoder,
        })
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResBlockSpec> {
        self.encoder
            .iter()
            .flatten()
            .chain(std::iter::once(&self.mid))
            .chain(self.decoder.iter().flatten())
    }

    /// Every parameter path with its shape.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let k = self.kernel_size;
        let mut m = BTreeMap::new();
        let conv = |m: &mut BTreeMap<String, Vec<usize>>, name: &str, i: usize, o: usize, k: usize| {
            m.insert(format!("{name}.weight"), vec![o, i, k, k, k]);
            m.insert(format!("{name}.bias"), vec![o]);
        };
        let w0 = self.widths[0];
        conv(&mut m, "stem", self.in_channels, w0, k);
        m.insert("time.0.weight".into(), vec![self.temb_dim, self.sin_dim]);
        m.insert("time.0.bias".into(), vec![self.temb_dim]);
        m.insert("time.1.weight".into(), vec![self.temb_dim, self.temb_dim]);
        m.insert("time.1.bias".into(), vec![self.temb_dim]);
        for b in self.blocks() {
            let p = &b.prefix;
            conv(&mut m, &format!("{p}.conv1"), b.in_channels, b.out_channels, k);
            m.insert(format!("{p}.temb.weight"), vec![b.out_channels, self.temb_dim]);
            m.insert(format!("{p}.temb.bias"), vec![b.out_channels]);
            m.insert(format!("{p}.norm.gain"), vec![b.out_channels]);
            m.insert(format!("{p}.norm.bias"), vec![b.out_channels]);
            conv(&mut m, &format!("{p}.conv2"), b.out_channels, b.out_channels, k);
            if b.has_shortcut() {
                conv(&mut m, &format!("{p}.shortcut"), b.in_channels, b.out_channels, 1);
            }
        }
        for l in 0..self.levels() - 1 {
            let (w, next) = (self.widths[l], self.widths[l + 1]);
            conv(&mut m, &format!("down.{l}"), w, w, k);
            conv(&mut m, &format!("up.{l}"), next, w, k);
        }
        if self.out_groups.is_some() {
            m.insert("out.norm.gain".into(), vec![w0]);
            m.insert("out.norm.bias".into(), vec![w0]);
        }
        conv(&mut m, "out.conv", w0, self.out_channels, k);
        m
    }
}
