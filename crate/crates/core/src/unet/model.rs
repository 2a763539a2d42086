use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, TensorOps};
use crate::unet::{Layout, ResBlockSpec, UNetConfig};

/// Sinusoidal features of `t`: `dim/2` sines followed by `dim/2` cosines
/// with geometrically spaced frequencies.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let t = t as f64;
    Tensor::from_fn(&[2 * half], |i| {
        let k = i % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let v = if i < half { (t * freq).sin() } else { (t * freq).cos() };
        T::from_f64(v)
    })
}

/// Network structure; parameters are supplied per call so one instance
/// serves any backend and scalar type.
#[derive(Clone, Debug)]
pub struct UNet {
    layout: Layout,
}

type Bound<V> = BTreeMap<String, V>;

fn param<'a, V>(bound: &'a Bound<V>, name: &str) -> Result<&'a V> {
    bound.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
}

impl UNet {
    pub fn new(config: &UNetConfig) -> Result<Self> {
        Ok(Self {
            layout: Layout::new(config)?,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Lifts parameters into a backend once so repeated forward passes can
    /// share them.
    pub fn bind<B: TensorOps>(
        &self,
        backend: &mut B,
        tensors: &BTreeMap<String, Tensor<B::Scalar>>,
        trainable: bool,
    ) -> Bound<B::Value> {
        tensors
            .iter()
            .map(|(k, v)| (k.clone(), backend.input(v, trainable)))
            .collect()
    }

    fn conv<B: TensorOps>(
        &self,
        b: &mut B,
        p: &Bound<B::Value>,
        name: &str,
        x: &B::Value,
        stride: usize,
        padding: usize,
    ) -> Result<B::Value> {
        let w = param(p, &format!("{name}.weight"))?;
        let bias = param(p, &format!("{name}.bias"))?;
        b.conv3d(x, w, Some(bias), stride, padding)
    }

    fn res_block<B: TensorOps>(
        &self,
        b: &mut B,
        p: &Bound<B::Value>,
        spec: &ResBlockSpec,
        x: &B::Value,
        temb: &B::Value,
    ) -> Result<B::Value> {
        let pre = &spec.prefix;
        let pad = self.layout.padding();
        let h = self.conv(b, p, &format!("{pre}.conv1"), x, 1, pad)?;
        let proj = b.linear(
            temb,
            param(p, &format!("{pre}.temb.weight"))?,
            param(p, &format!("{pre}.temb.bias"))?,
        )?;
        let h = b.add_channel_bias(&h, &proj)?;
        let h = b.group_norm(
            &h,
            spec.groups,
            param(p, &format!("{pre}.norm.gain"))?,
            param(p, &format!("{pre}.norm.bias"))?,
        )?;
        let h = b.silu(&h);
        let h = self.conv(b, p, &format!("{pre}.conv2"), &h, 1, pad)?;
        let skip = if spec.has_shortcut() {
            self.conv(b, p, &format!("{pre}.shortcut"), x, 1, 0)?
        } else {
            x.clone()
        };
        b.add(&skip, &h)
    }

    /// Noise prediction for input `x` (`[C, D, H, W]`) at timestep `t`.
    pub fn forward<B: TensorOps>(&self, b: &mut B, p: &Bound<B::Value>, x: &B::Value, t: usize) -> Result<B::Value> {
        let lay = &self.layout;
        let input = b.value(x);
        input.expect_volume("unet forward")?;
        if input.channels() != lay.in_channels {
            return Err(Error::ShapeMismatch {
                op: "unet forward channels",
                left: vec![lay.in_channels],
                right: input.shape().to_vec(),
            });
        }
        let factor = 1 << (lay.levels() - 1);
        if let Some(&extent) = input.extents().iter().find(|&&e| e % factor != 0) {
            return Err(Error::NotDivisible {
                op: "unet forward",
                extent,
                factor,
            });
        }

        let sin = b.input(&timestep_embedding(t, lay.sin_dim), false);
        let temb = b.linear(&sin, param(p, "time.0.weight")?, param(p, "time.0.bias")?)?;
        let temb = b.silu(&temb);
        let temb = b.linear(&temb, param(p, "time.1.weight")?, param(p, "time.1.bias")?)?;
        // every block consumes SiLU(temb)
        let temb = b.silu(&temb);

        let pad = lay.padding();
        let mut h = self.conv(b, p, "stem", x, 1, pad)?;
        let mut skips = Vec::with_capacity(lay.levels());
        for (l, blocks) in lay.encoder.iter().enumerate() {
            for spec in blocks {
                h = self.res_block(b, p, spec, &h, &temb)?;
            }
            skips.push(h.clone());
            if l + 1 < lay.levels() {
                h = self.conv(b, p, &format!("down.{l}"), &h, 2, pad)?;
            }
        }
        h = self.res_block(b, p, &lay.mid, &h, &temb)?;
        for l in (0..lay.levels()).rev() {
            if l + 1 < lay.levels() {
                let up = b.upsample_nearest(&h, 2)?;
                h = self.conv(b, p, &format!("up.{l}"), &up, 1, pad)?;
            }
            let skip = skips.pop().expect("one skip per level");
            h = b.average(&skip, &h)?;
            for spec in &lay.decoder[l] {
                h = self.res_block(b, p, spec, &h, &temb)?;
            }
        }
        let h = match lay.out_groups {
            Some(g) => b.group_norm(&h, g, param(p, "out.norm.gain")?, param(p, "out.norm.bias")?)?,
            None => h,
        };
        let h = b.silu(&h);
        self.conv(b, p, "out.conv", &h, 1, pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_sampled, Eager, Graph};
    use crate::unet::build_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(levels: usize) -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            out_channels: 1,
            base_width: 4,
            channel_multipliers: vec![1; levels],
            blocks_per_level: 1,
            ..Default::default()
        }
    }

    fn randomize_output(p: &mut crate::unet::ModelParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["out.conv.weight", "out.conv.bias"] {
            let shape = p.tensors[name].shape().to_vec();
            let t = Tensor::<f32>::randn(&shape, &mut rng).map(|v| 0.1 * v);
            p.tensors.insert(name.to_string(), t);
        }
    }

    fn eval(p: &crate::unet::ModelParams, x: &Tensor, t: usize) -> Tensor {
        let net = p.network().unwrap();
        let mut e = Eager::<f32>::new();
        let bound = net.bind(&mut e, &p.tensors, false);
        net.forward(&mut e, &bound, x, t).unwrap()
    }

    #[test]
    fn embedding_is_deterministic_and_bounded() {
        let a: Tensor<f64> = timestep_embedding(17, 8);
        let b: Tensor<f64> = timestep_embedding(17, 8);
        assert_eq!(a, b);
        assert_eq!(a.data()[0], (17f64).sin());
        assert_eq!(a.data()[4], (17f64).cos());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, timestep_embedding::<f64>(18, 8));
    }

    #[test]
    fn zero_output_layer_gives_exact_zero() {
        let p = build_model(&tiny(2), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[3, 8, 8, 8], &mut rng);
        let y = eval(&p, &x, 500);
        assert_eq!(y.shape(), &[1, 8, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn timestep_conditioning_is_live() {
        let mut p = build_model(&tiny(2), 3).unwrap();
        randomize_output(&mut p, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(&[3, 8, 8, 8], &mut rng);
        let d = eval(&p, &x, 1).max_abs_diff(&eval(&p, &x, 1000));
        assert!(d > 0.0, "{d}");
    }

    #[test]
    fn evaluates_at_several_extents() {
        let mut p = build_model(&tiny(3), 6).unwrap();
        randomize_output(&mut p, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in [16, 32] {
            let x = Tensor::<f32>::randn(&[3, s, s, s], &mut rng);
            let y = eval(&p, &x, 10);
            assert_eq!(y.shape(), &[1, s, s, s]);
            assert!(y.is_finite());
        }
        // anisotropic extents work as long as each is divisible by 4
        let x = Tensor::<f32>::randn(&[3, 8, 12, 4], &mut rng);
        assert_eq!(eval(&p, &x, 10).shape(), &[1, 8, 12, 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = build_model(&tiny(3), 6).unwrap();
        let net = p.network().unwrap();
        let mut e = Eager::<f32>::new();
        let bound = net.bind(&mut e, &p.tensors, false);
        let odd = Tensor::<f32>::zeros(&[3, 8, 6, 8]);
        assert!(matches!(
            net.forward(&mut e, &bound, &odd, 1),
            Err(Error::NotDivisible { extent: 6, factor: 4, .. })
        ));
        let wrong = Tensor::<f32>::zeros(&[4, 8, 8, 8]);
        assert!(matches!(
            net.forward(&mut e, &bound, &wrong, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn graph_and_eager_agree() {
        let mut p = build_model(&tiny(2), 9).unwrap();
        randomize_output(&mut p, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::randn(&[3, 8, 8, 8], &mut rng);
        let net = p.network().unwrap();
        let mut g = Graph::<f32>::new();
        let bound = net.bind(&mut g, &p.tensors, true);
        let xv = g.leaf(x.clone(), false);
        let out = net.forward(&mut g, &bound, &xv, 321).unwrap();
        assert_eq!(g.get(out), &eval(&p, &x, 321));
    }

    #[test]
    fn full_model_gradient_check() {
        let mut p = build_model(&tiny(2), 12).unwrap();
        randomize_output(&mut p, 13);
        let net = p.network().unwrap();
        let names: Vec<String> = p.tensors.keys().cloned().collect();
        let point: Vec<Tensor<f64>> = p.tensors.values().map(|t| t.cast()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::<f64>::randn(&[3, 8, 8, 8], &mut rng);
        let target = Tensor::<f64>::randn(&[1, 8, 8, 8], &mut rng);
        let report = grad_check_sampled(
            |g, vars| {
                let bound: BTreeMap<String, _> = names.iter().cloned().zip(vars.iter().copied()).collect();
                let xv = g.leaf(x.clone(), false);
                let tv = g.leaf(target.clone(), false);
                let out = net.forward(g, &bound, &xv, 250)?;
                g.mse_loss(out, tv)
            },
            &point,
            1e-3,
            120,
            15,
        )
        .unwrap();
        assert!(report.checked >= 100);
        assert!(report.passed(), "{report:?}");
    }
}
