use serde::Serialize;

use crate::error::Result;
use crate::tensor::kernels::ConvGeometry;
use crate::unet::{Layout, ResBlockSpec, UNetConfig};

/// Analytic cost of one forward pass over a cubic input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    /// Multiply-accumulates in convolutions and linear layers.
    pub macs: u64,
    /// `2 · macs`.
    pub flops: u64,
    pub parameters: u64,
    /// Every activation produced by the pass, i.e. what a training tape keeps.
    pub activation_bytes: u64,
    /// Largest set of simultaneously live activations during inference,
    /// counting retained skips plus the inputs and output of the current op.
    pub peak_live_bytes: u64,
}

struct Walker {
    macs: u64,
    produced: u64,
    peak: u64,
    retained: u64,
}

const F32: u64 = 4;

impl Walker {
    fn op(&mut self, inputs: u64, output: u64) {
        self.produced += output;
        self.peak = self.peak.max(self.retained + inputs + output);
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, ext: [usize; 3]) -> [usize; 3] {
        let g = ConvGeometry::new(&[cin, ext[0], ext[1], ext[2]], &[cout, cin, k, k, k], stride, pad)
            .expect("layout-consistent geometry");
        self.macs += g.macs();
        let vin = (cin * ext.iter().product::<usize>()) as u64;
        self.op(vin, (cout * g.out_voxels()) as u64);
        g.out_extents
    }

    fn block(&mut self, spec: &ResBlockSpec, k: usize, temb: usize, ext: [usize; 3]) {
        let v = ext.iter().product::<usize>() as u64;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let xin = cin as u64 * v;
        let h = cout as u64 * v;
        // the block input stays live until the residual add
        self.retained += xin;
        self.conv(cin, cout, k, 1, k / 2, ext);
        self.macs += (cout * temb) as u64;
        for _ in 0..3 {
            // channel bias, norm, SiLU
            self.op(h, h);
        }
        self.conv(cout, cout, k, 1, k / 2, ext);
        if spec.has_shortcut() {
            self.conv(cin, cout, 1, 1, 0, ext);
        }
        self.retained -= xin;
        self.op(xin + h, h);
    }
}

pub fn count_flops_and_peak_memory(config: &UNetConfig, input_extent: usize) -> Result<CostReport> {
    let lay = Layout::new(config)?;
    let k = lay.kernel_size;
    let pad = k / 2;
    let mut w = Walker {
        macs: (lay.temb_dim * lay.sin_dim + lay.temb_dim * lay.temb_dim) as u64,
        produced: 0,
        peak: 0,
        retained: 0,
    };
    let mut ext = [input_extent; 3];
    let vox = |e: [usize; 3]| e.iter().product::<usize>() as u64;

    w.conv(lay.in_channels, lay.widths[0], k, 1, pad, ext);
    let mut skip_sizes = Vec::new();
    for (l, blocks) in lay.encoder.iter().enumerate() {
        for spec in blocks {
            w.block(spec, k, lay.temb_dim, ext);
        }
        let s = lay.widths[l] as u64 * vox(ext);
        skip_sizes.push(s);
        w.retained += s;
        if l + 1 < lay.levels() {
            ext = w.conv(lay.widths[l], lay.widths[l], k, 2, pad, ext);
        }
    }
    w.block(&lay.mid, k, lay.temb_dim, ext);
    for l in (0..lay.levels()).rev() {
        if l + 1 < lay.levels() {
            let c = lay.widths[l + 1] as u64;
            let up = [ext[0] * 2, ext[1] * 2, ext[2] * 2];
            w.op(c * vox(ext), c * vox(up));
            ext = up;
            ext = w.conv(lay.widths[l + 1], lay.widths[l], k, 1, pad, ext);
        }
        let s = skip_sizes.pop().expect("skip per level");
        w.retained -= s;
        w.op(2 * s, s);
        for spec in &lay.decoder[l] {
            w.block(spec, k, lay.temb_dim, ext);
        }
    }
    let h = lay.widths[0] as u64 * vox(ext);
    if lay.out_groups.is_some() {
        w.op(h, h);
    }
    w.op(h, h);
    w.conv(lay.widths[0], lay.out_channels, k, 1, pad, ext);

    let parameters = lay.parameter_shapes().values().map(|s| s.iter().product::<usize>() as u64).sum();
    Ok(CostReport {
        macs: w.macs,
        flops: 2 * w.macs,
        parameters,
        activation_bytes: F32 * w.produced,
        peak_live_bytes: F32 * w.peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_extent_scales_flops_by_about_eight() {
        let cfg = UNetConfig::default();
        let a = count_flops_and_peak_memory(&cfg, 16).unwrap();
        let b = count_flops_and_peak_memory(&cfg, 32).unwrap();
        let r = b.flops as f64 / a.flops as f64;
        assert!((7.5..=8.5).contains(&r), "{r}");
        let m = b.activation_bytes as f64 / a.activation_bytes as f64;
        assert!((m - 8.0).abs() < 1e-9, "{m}");
    }

    #[test]
    fn single_level_pointwise_count() {
        let cfg = UNetConfig {
            in_channels: 6,
            out_channels: 1,
            base_width: 4,
            channel_multipliers: vec![1],
            blocks_per_level: 1,
            kernel_size: 1,
            ..Default::default()
        };
        let (s, w, temb, sin) = (8u64, 4u64, 16u64, 4u64);
        let v = s * s * s;
        // time MLP, stem, three residual blocks (enc, mid, dec), output conv
        let expected = sin * temb + temb * temb + 6 * w * v + 3 * (2 * w * w * v + w * temb) + w * v;
        let r = count_flops_and_peak_memory(&cfg, 8).unwrap();
        assert_eq!(r.macs, expected);
        assert_eq!(r.flops, 2 * expected);
    }

    #[test]
    fn zero_channels_rejected() {
        let cfg = UNetConfig {
            in_channels: 0,
            ..Default::default()
        };
        assert!(count_flops_and_peak_memory(&cfg, 16).is_err());
        let cfg = UNetConfig {
            width_multiplier: 0.01,
            ..Default::default()
        };
        assert!(count_flops_and_peak_memory(&cfg, 16).is_err());
    }
}
