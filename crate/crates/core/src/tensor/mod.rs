//! Dense tensors (`f32` unless stated otherwise) with a small reverse-mode
//! autodiff engine.
//!
//! Volumetric tensors use channel-first layout `[C, D, H, W]`. Everything the
//! denoiser needs is here and nothing more: 3D convolution, group
//! normalization, SiLU, linear maps, nearest/average resampling, averaging
//! skip junctions and the MSE loss.
//!
//! The network code is written once against [`TensorOps`] and runs either on
//! a recording [`Graph`] (training, gradients) or on [`Eager`] values
//! (inference, intermediate activations are freed as soon as they go out of
//! scope).

mod eager;
mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;

pub use eager::Eager;
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Real;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }

    // ---- volumetric helpers, `[C, D, H, W]` ----

    pub fn zeros_volume(channels: usize, extents: [usize; 3]) -> Self {
        Self::zeros(&[channels, extents[0], extents[1], extents[2]])
    }

    pub fn expect_volume(&self, op: &'static str) -> Result<()> {
        if self.shape.len() != 4 {
            return Err(invalid(format!(
                "{op}: expected a [C, D, H, W] volume, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn select_channels(&self, start: usize, count: usize) -> Result<Tensor<T>> {
        self.expect_volume("select_channels")?;
        if count == 0 || start + count > self.channels() {
            return Err(invalid(format!(
                "channel range {start}..{} outside 0..{}",
                start + count,
                self.channels()
            )));
        }
        let n = self.voxels();
        let [d, h, w] = self.extents();
        Tensor::new(
            vec![count, d, h, w],
            self.data[start * n..(start + count) * n].to_vec(),
        )
    }

    /// Stacks volumes along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_channels needs at least one part"))?;
        first.expect_volume("concat_channels")?;
        let extents = first.extents();
        let mut channels = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for part in parts {
            part.expect_volume("concat_channels")?;
            if part.extents() != extents {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: first.shape.clone(),
                    right: part.shape.clone(),
                });
            }
            channels += part.channels();
            data.extend_from_slice(&part.data);
        }
        Tensor::new(vec![channels, extents[0], extents[1], extents[2]], data)
    }

    /// Spatial crop of every channel.
    pub fn crop(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Tensor<T>> {
        self.expect_volume("crop")?;
        let vol = self.extents();
        if (0..3).any(|a| extent[a] == 0 || origin[a] + extent[a] > vol[a]) {
            return Err(Error::PatchOutOfBounds {
                origin,
                extent,
                volume: vol,
            });
        }
        let c = self.channels();
        let [_, h, w] = vol;
        let mut out = Vec::with_capacity(c * extent.iter().product::<usize>());
        for ch in 0..c {
            let src = self.channel(ch);
            for z in origin[0]..origin[0] + extent[0] {
                for y in origin[1]..origin[1] + extent[1] {
                    let row = (z * h + y) * w;
                    out.extend_from_slice(&src[row + origin[2]..row + origin[2] + extent[2]]);
                }
            }
        }
        Tensor::new(vec![c, extent[0], extent[1], extent[2]], out)
    }

    /// Writes `patch` into this volume at `origin` (inverse of [`Tensor::crop`]).
    pub fn paste(&mut self, patch: &Tensor<T>, origin: [usize; 3]) -> Result<()> {
        self.expect_volume("paste")?;
        patch.expect_volume("paste")?;
        let vol = self.extents();
        let extent = patch.extents();
        if patch.channels() != self.channels() || (0..3).any(|a| origin[a] + extent[a] > vol[a]) {
            return Err(Error::PatchOutOfBounds {
                origin,
                extent,
                volume: vol,
            });
        }
        let [_, h, w] = vol;
        for ch in 0..self.channels() {
            let src = patch.channel(ch).to_vec();
            let dst = self.channel_mut(ch);
            let mut k = 0;
            for z in origin[0]..origin[0] + extent[0] {
                for y in origin[1]..origin[1] + extent[1] {
                    let row = (z * h + y) * w + origin[2];
                    dst[row..row + extent[2]].copy_from_slice(&src[k..k + extent[2]]);
                    k += extent[2];
                }
            }
        }
        Ok(())
    }
}

/// Operation set shared by the recording graph and the eager evaluator.
///
/// Volumetric inputs are `[C, D, H, W]`; kernels are `[O, I, k, k, k]`.
pub trait TensorOps {
    type Scalar: Real;
    type Value: Clone;

    /// Lifts a tensor into the backend. On a [`Graph`] this creates a leaf
    /// that accumulates gradients when `trainable` is set.
    fn input(&mut self, tensor: &Tensor<Self::Scalar>, trainable: bool) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<Self::Scalar>;

    fn conv3d(
        &mut self,
        input: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;

    fn group_norm(
        &mut self,
        input: &Self::Value,
        groups: usize,
        gain: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value>;

    fn silu(&mut self, input: &Self::Value) -> Self::Value;

    /// `weight · input + bias` for a vector input.
    fn linear(&mut self, input: &Self::Value, weight: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    /// Skip junction `(skip + up) / 2`.
    fn average(&mut self, skip: &Self::Value, up: &Self::Value) -> Result<Self::Value>;

    /// Adds a per-channel vector to every voxel of the matching channel.
    fn add_channel_bias(&mut self, input: &Self::Value, per_channel: &Self::Value) -> Result<Self::Value>;

    fn upsample_nearest(&mut self, input: &Self::Value, factor: usize) -> Result<Self::Value>;

    fn downsample_avg(&mut self, input: &Self::Value, factor: usize) -> Result<Self::Value>;
}
