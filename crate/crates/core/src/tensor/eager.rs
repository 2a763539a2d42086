use std::marker::PhantomData;

use crate::error::Result;
use crate::tensor::kernels;
use crate::tensor::{Real, Tensor, TensorOps};

/// Gradient-free evaluation on owned tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager<T: Real = f32>(PhantomData<T>);

impl<T: Real> Eager<T> {
    pub fn new() -> Self {
        Self(PhantomData)
    }
}

impl<T: Real> TensorOps for Eager<T> {
    type Scalar = T;
    type Value = Tensor<T>;

    fn input(&mut self, tensor: &Tensor<T>, _trainable: bool) -> Tensor<T> {
        tensor.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv3d(&mut self, input: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        kernels::conv3d_forward(input, kernel, bias, stride, padding)
    }

    fn group_norm(&mut self, input: &Tensor<T>, groups: usize, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::group_norm_forward(input, groups, gain, bias).map(|(out, _)| out)
    }

    fn silu(&mut self, input: &Tensor<T>) -> Tensor<T> {
        kernels::silu_forward(input)
    }

    fn linear(&mut self, input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::linear_forward(input, weight, bias)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, "add", |x, y| x + y)
    }

    fn average(&mut self, skip: &Tensor<T>, up: &Tensor<T>) -> Result<Tensor<T>> {
        skip.zip_map(up, "average", |x, y| (x + y) * T::from_f64(0.5))
    }

    fn add_channel_bias(&mut self, input: &Tensor<T>, per_channel: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::add_channel_bias_forward(input, per_channel)
    }

    fn upsample_nearest(&mut self, input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        kernels::upsample_nearest_forward(input, factor)
    }

    fn downsample_avg(&mut self, input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        kernels::downsample_avg_forward(input, factor)
    }
}
