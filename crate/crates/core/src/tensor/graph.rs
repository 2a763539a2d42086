use crate::error::{invalid, Result};
use crate::tensor::kernels::{self, GroupStats};
use crate::tensor::{Real, Tensor, TensorOps};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        input: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        stats: GroupStats,
    },
    Silu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Average(Var, Var),
    AddChannelBias(Var, Var),
    Upsample(Var, usize),
    Downsample(Var, usize),
    Mse {
        pred: Var,
        target: Var,
    },
    Sum(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the tape
/// is a valid topological order for the backward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients indexed by [`Var`]; only leaves that require gradients are kept.
pub struct Gradients<T: Real = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Scalar mean squared error between `pred` and `target`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = kernels::mse_forward(self.get(pred), self.get(target))?;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, v: Var) -> Var {
        let s = T::from_f64(self.get(v).sum_f64());
        let rg = self.any_grad(&[v]);
        self.push(Tensor::scalar(s), Op::Sum(v), rg)
    }

    /// Reverse sweep from `output`, seeded with ones (the gradient of the sum
    /// of its elements).
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(invalid("backward: unknown variable"));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_shape = self.get(output).shape().to_vec();
        slots[output.0] = Some(Tensor::full(&out_shape, T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            let acc = |slots: &mut Vec<Option<Tensor<T>>>, v: Var, g: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut slots[v.0] {
                    Some(existing) => existing
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let g = kernels::conv3d_backward(self.get(*input), self.get(*kernel), *stride, *padding, &grad)?;
                    acc(&mut slots, *input, g.input);
                    acc(&mut slots, *kernel, g.kernel);
                    if let Some(b) = bias {
                        acc(&mut slots, *b, g.bias);
                    }
                }
                Op::GroupNorm {
                    input,
                    gain,
                    bias,
                    groups,
                    stats,
                } => {
                    let (dx, dg, db) =
                        kernels::group_norm_backward(self.get(*input), *groups, self.get(*gain), stats, &grad);
                    acc(&mut slots, *input, dx);
                    acc(&mut slots, *gain, dg);
                    acc(&mut slots, *bias, db);
                }
                Op::Silu(x) => acc(&mut slots, *x, kernels::silu_backward(self.get(*x), &grad)),
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) = kernels::linear_backward(self.get(*input), self.get(*weight), &grad);
                    acc(&mut slots, *input, dx);
                    acc(&mut slots, *weight, dw);
                    acc(&mut slots, *bias, db);
                }
                Op::Add(a, b) => {
                    acc(&mut slots, *a, grad.clone());
                    acc(&mut slots, *b, grad);
                }
                Op::Average(a, b) => {
                    let half = grad.map(|v| v * T::from_f64(0.5));
                    acc(&mut slots, *a, half.clone());
                    acc(&mut slots, *b, half);
                }
                Op::AddChannelBias(x, v) => {
                    acc(&mut slots, *v, kernels::channel_sums(&grad));
                    acc(&mut slots, *x, grad);
                }
                Op::Upsample(x, f) => acc(&mut slots, *x, kernels::block_sum(&grad, *f)),
                Op::Downsample(x, f) => acc(&mut slots, *x, kernels::downsample_avg_backward(&grad, *f)),
                Op::Mse { pred, target } => {
                    let (p, t) = (self.get(*pred), self.get(*target));
                    let dp = kernels::mse_backward(p, t, grad.item());
                    acc(&mut slots, *target, dp.map(|v| -v));
                    acc(&mut slots, *pred, dp);
                }
                Op::Sum(x) => {
                    let shape = self.get(*x).shape().to_vec();
                    acc(&mut slots, *x, Tensor::full(&shape, grad.item()));
                }
            }
        }
        Ok(Gradients { slots })
    }
}

impl<T: Real> TensorOps for Graph<T> {
    type Scalar = T;
    type Value = Var;

    fn input(&mut self, tensor: &Tensor<T>, trainable: bool) -> Var {
        self.leaf(tensor.clone(), trainable)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.get(*v)
    }

    fn conv3d(&mut self, input: &Var, kernel: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv3d_forward(self.get(*input), self.get(*kernel), bias.map(|b| self.get(*b)), stride, padding)?;
        let mut deps = vec![*input, *kernel];
        deps.extend(bias.copied());
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv3d {
                input: *input,
                kernel: *kernel,
                bias: bias.copied(),
                stride,
                padding,
            },
            rg,
        ))
    }

    fn group_norm(&mut self, input: &Var, groups: usize, gain: &Var, bias: &Var) -> Result<Var> {
        let (out, stats) = kernels::group_norm_forward(self.get(*input), groups, self.get(*gain), self.get(*bias))?;
        let rg = self.any_grad(&[*input, *gain, *bias]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                input: *input,
                gain: *gain,
                bias: *bias,
                groups,
                stats,
            },
            rg,
        ))
    }

    fn silu(&mut self, input: &Var) -> Var {
        let out = kernels::silu_forward(self.get(*input));
        let rg = self.any_grad(&[*input]);
        self.push(out, Op::Silu(*input), rg)
    }

    fn linear(&mut self, input: &Var, weight: &Var, bias: &Var) -> Result<Var> {
        let out = kernels::linear_forward(self.get(*input), self.get(*weight), self.get(*bias))?;
        let rg = self.any_grad(&[*input, *weight, *bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input: *input,
                weight: *weight,
                bias: *bias,
            },
            rg,
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.get(*a).zip_map(self.get(*b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[*a, *b]);
        Ok(self.push(out, Op::Add(*a, *b), rg))
    }

    fn average(&mut self, skip: &Var, up: &Var) -> Result<Var> {
        let out = self.get(*skip).zip_map(self.get(*up), "average", |x, y| (x + y) * T::from_f64(0.5))?;
        let rg = self.any_grad(&[*skip, *up]);
        Ok(self.push(out, Op::Average(*skip, *up), rg))
    }

    fn add_channel_bias(&mut self, input: &Var, per_channel: &Var) -> Result<Var> {
        let out = kernels::add_channel_bias_forward(self.get(*input), self.get(*per_channel))?;
        let rg = self.any_grad(&[*input, *per_channel]);
        Ok(self.push(out, Op::AddChannelBias(*input, *per_channel), rg))
    }

    fn upsample_nearest(&mut self, input: &Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest_forward(self.get(*input), factor)?;
        let rg = self.any_grad(&[*input]);
        Ok(self.push(out, Op::Upsample(*input, factor), rg))
    }

    fn downsample_avg(&mut self, input: &Var, factor: usize) -> Result<Var> {
        let out = kernels::downsample_avg_forward(self.get(*input), factor)?;
        let rg = self.any_grad(&[*input]);
        Ok(self.push(out, Op::Downsample(*input, factor), rg))
    }
}
