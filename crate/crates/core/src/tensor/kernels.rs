//! Forward and backward kernels on plain tensors.
//!
//! These are the numerical routines behind both backends. Convolution is
//! lowered to a single GEMM per call through an im2col buffer; the buffer is
//! rebuilt during the backward pass instead of being cached.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_extents: [usize; 3],
    pub out_extents: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv3d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        if input.len() != 4 || kernel.len() != 5 {
            return Err(mismatch());
        }
        let k = kernel[2];
        if kernel[1] != input[0] || kernel[3] != k || kernel[4] != k {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(invalid("conv3d: stride must be positive"));
        }
        let mut out_extents = [0; 3];
        for a in 0..3 {
            let padded = input[a + 1] + 2 * padding;
            if padded < k {
                return Err(mismatch());
            }
            out_extents[a] = (padded - k) / stride + 1;
        }
        Ok(Self {
            in_channels: input[0],
            out_channels: kernel[0],
            kernel: k,
            stride,
            padding,
            in_extents: [input[1], input[2], input[3]],
            out_extents,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn out_voxels(&self) -> usize {
        self.out_extents.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Multiply-accumulates for one evaluation (bias excluded).
    pub fn macs(&self) -> u64 {
        (self.out_channels * self.patch_len() * self.out_voxels()) as u64
    }

    /// Output index range along one axis whose input tap `o*stride + k - padding`
    /// stays inside `0..extent`.
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let extent = self.in_extents[axis] as isize;
        let (s, p, k) = (self.stride as isize, self.padding as isize, tap as isize);
        let out = self.out_extents[axis] as isize;
        // smallest o with o*s + k - p >= 0
        let lo = if p - k <= 0 { 0 } else { (p - k + s - 1) / s };
        // largest o with o*s + k - p <= extent - 1
        let hi_num = extent - 1 + p - k;
        let hi = if hi_num < 0 { -1 } else { (hi_num / s).min(out - 1) };
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeometry, col: &mut [T]) {
    let [id, ih, iw] = g.in_extents;
    let [_, oh, ow] = g.out_extents;
    let n = g.out_voxels();
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    col.fill(T::zero());
    for ci in 0..g.in_channels {
        let src = &input[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            let (z0, z1) = g.valid_range(0, kz);
            for ky in 0..k {
                let (y0, y1) = g.valid_range(1, ky);
                for kx in 0..k {
                    let (x0, x1) = g.valid_range(2, kx);
                    if x0 == x1 {
                        continue;
                    }
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let src_row = &src[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let dst_row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if s == 1 {
                                let ix0 = x0 + kx - p;
                                dst_row[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    dst_row[ox] = src_row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeometry, out: &mut [T]) {
    let [id, ih, iw] = g.in_extents;
    let [_, oh, ow] = g.out_extents;
    let n = g.out_voxels();
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    for ci in 0..g.in_channels {
        let dst = &mut out[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            let (z0, z1) = g.valid_range(0, kz);
            for ky in 0..k {
                let (y0, y1) = g.valid_range(1, ky);
                for kx in 0..k {
                    let (x0, x1) = g.valid_range(2, kx);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let src_row = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst_row = &mut dst[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            for ox in x0..x1 {
                                dst_row[ox * s + kx - p] += src_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`, all row-major unless the
/// strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose lengths cover the strided extents
    // (checked by debug assertions above and by construction in this module).
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { T::one() } else { T::zero() },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: kernel.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
    }
    let n = g.out_voxels();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.out_channels * n];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bv);
        }
    }
    let owned;
    let col: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        let mut buf = vec![T::zero(); kk * n];
        im2col(input.data(), &g, &mut buf);
        owned = buf;
        &owned
    };
    gemm(
        g.out_channels,
        kk,
        n,
        kernel.data(),
        (kk as isize, 1),
        col,
        (n as isize, 1),
        &mut out,
        bias.is_some(),
    );
    let [d, h, w] = g.out_extents;
    Tensor::new(vec![g.out_channels, d, h, w], out)
}

pub struct ConvGrads<T: Real = f32> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let n = g.out_voxels();
    let kk = g.patch_len();
    let dy = grad_out.data();

    let bias: Vec<T> = (0..g.out_channels)
        .map(|o| T::from_f64(dy[o * n..(o + 1) * n].iter().map(|v| v.as_f64()).sum::<f64>()))
        .collect();

    let owned;
    let col: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        let mut buf = vec![T::zero(); kk * n];
        im2col(input.data(), &g, &mut buf);
        owned = buf;
        &owned
    };
    let mut dkernel = vec![T::zero(); g.out_channels * kk];
    // dW = dY · colᵀ
    gemm(g.out_channels, n, kk, dy, (n as isize, 1), col, (1, n as isize), &mut dkernel, false);

    // dcol = Wᵀ · dY
    let mut dcol = vec![T::zero(); kk * n];
    gemm(kk, g.out_channels, n, kernel.data(), (1, kk as isize), dy, (n as isize, 1), &mut dcol, false);
    let dinput = if g.is_pointwise() {
        dcol
    } else {
        let mut dx = vec![T::zero(); input.len()];
        col2im(&dcol, &g, &mut dx);
        dx
    };

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dinput)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dkernel)?,
        bias: Tensor::new(vec![g.out_channels], bias)?,
    })
}

/// Per-group `(mean, 1/sqrt(var + eps))`.
pub type GroupStats = Vec<(f64, f64)>;

fn check_group_norm<T: Real>(input: &Tensor<T>, groups: usize, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let c = input.shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(invalid(format!(
            "group_norm: {c} channels are not divisible into {groups} groups"
        )));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            left: input.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn group_norm_forward<T: Real>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, GroupStats)> {
    check_group_norm(input, groups, gain, bias)?;
    let c = input.shape()[0];
    let spatial = input.len() / c;
    let per_group = c / groups;
    let m = (per_group * spatial) as f64;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(groups);
    for gi in 0..groups {
        let span = gi * per_group * spatial..(gi + 1) * per_group * spatial;
        let xs = &x[span.clone()];
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
        let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        stats.push((mean, rstd));
        for cl in 0..per_group {
            let ch = gi * per_group + cl;
            let (gn, bn) = (gain.data()[ch].as_f64(), bias.data()[ch].as_f64());
            let range = ch * spatial..(ch + 1) * spatial;
            for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                *o = T::from_f64(((v.as_f64() - mean) * rstd) * gn + bn);
            }
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, stats))
}

pub fn group_norm_backward<T: Real>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    stats: &GroupStats,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = input.shape()[0];
    let spatial = input.len() / c;
    let per_group = c / groups;
    let m = (per_group * spatial) as f64;
    let x = input.data();
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    for (gi, &(mean, rstd)) in stats.iter().enumerate() {
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for cl in 0..per_group {
            let ch = gi * per_group + cl;
            let gn = gain.data()[ch].as_f64();
            let (mut dg, mut db) = (0.0f64, 0.0f64);
            for i in ch * spatial..(ch + 1) * spatial {
                let xhat = (x[i].as_f64() - mean) * rstd;
                let g = dy[i].as_f64();
                dg += g * xhat;
                db += g;
                sum_dxhat += g * gn;
                sum_dxhat_xhat += g * gn * xhat;
            }
            dgain[ch] = T::from_f64(dg);
            dbias[ch] = T::from_f64(db);
        }
        for cl in 0..per_group {
            let ch = gi * per_group + cl;
            let gn = gain.data()[ch].as_f64();
            for i in ch * spatial..(ch + 1) * spatial {
                let xhat = (x[i].as_f64() - mean) * rstd;
                let dxhat = dy[i].as_f64() * gn;
                dx[i] = T::from_f64(rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
            }
        }
    }
    let shape = input.shape().to_vec();
    (
        Tensor::new(shape, dx).expect("shape preserved"),
        Tensor::new(vec![c], dgain).expect("shape preserved"),
        Tensor::new(vec![c], dbias).expect("shape preserved"),
    )
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * sigmoid(x))
}

pub fn silu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

fn check_linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let ok = input.shape().len() == 1
        && weight.shape().len() == 2
        && weight.shape()[1] == input.shape()[0]
        && bias.shape() == [weight.shape()[0]];
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn linear_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_linear(input, weight, bias)?;
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let x = input.data();
    let data = (0..out)
        .map(|o| {
            let row = &weight.data()[o * inp..(o + 1) * inp];
            let acc: f64 = row.iter().zip(x).map(|(w, v)| w.as_f64() * v.as_f64()).sum();
            T::from_f64(acc + bias.data()[o].as_f64())
        })
        .collect();
    Tensor::new(vec![out], data)
}

pub fn linear_backward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let x = input.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0f64; inp];
    let mut dw = vec![T::zero(); out * inp];
    for o in 0..out {
        let row = &weight.data()[o * inp..(o + 1) * inp];
        for i in 0..inp {
            dx[i] += dy[o].as_f64() * row[i].as_f64();
            dw[o * inp + i] = dy[o] * x[i];
        }
    }
    (
        Tensor::new(vec![inp], dx.into_iter().map(T::from_f64).collect()).expect("shape"),
        Tensor::new(vec![out, inp], dw).expect("shape"),
        grad_out.clone(),
    )
}

pub fn add_channel_bias_forward<T: Real>(input: &Tensor<T>, per_channel: &Tensor<T>) -> Result<Tensor<T>> {
    let c = input.shape()[0];
    if per_channel.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "add_channel_bias",
            left: input.shape().to_vec(),
            right: per_channel.shape().to_vec(),
        });
    }
    let spatial = input.len() / c;
    let mut out = input.clone();
    for (ch, &b) in per_channel.data().iter().enumerate() {
        out.data_mut()[ch * spatial..(ch + 1) * spatial]
            .iter_mut()
            .for_each(|v| *v += b);
    }
    Ok(out)
}

pub fn channel_sums<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let c = grad.shape()[0];
    let spatial = grad.len() / c;
    Tensor::from_fn(&[c], |ch| {
        T::from_f64(
            grad.data()[ch * spatial..(ch + 1) * spatial]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>(),
        )
    })
}

fn check_factor<T: Real>(input: &Tensor<T>, factor: usize, op: &'static str, divisible: bool) -> Result<()> {
    input.expect_volume(op)?;
    if factor < 2 {
        return Err(invalid(format!("{op}: factor must be at least 2, got {factor}")));
    }
    if divisible {
        if let Some(&extent) = input.extents().iter().find(|&&e| e % factor != 0) {
            return Err(Error::NotDivisible { op, extent, factor });
        }
    }
    Ok(())
}

pub fn upsample_nearest_forward<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(input, factor, "upsample_nearest", false)?;
    let c = input.channels();
    let [d, h, w] = input.extents();
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        let src = input.channel(ch);
        for z in 0..od {
            for y in 0..oh {
                let row = &src[((z / factor) * h + y / factor) * w..][..w];
                for &v in row {
                    for _ in 0..factor {
                        out.push(v);
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, od, oh, ow], out)
}

/// Adjoint of nearest upsampling: sums each `factor³` block.
pub fn block_sum<T: Real>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let c = grad.channels();
    let [od, oh, ow] = grad.extents();
    let (d, h, w) = (od / factor, oh / factor, ow / factor);
    let mut out = vec![T::zero(); c * d * h * w];
    for ch in 0..c {
        let src = grad.channel(ch);
        let dst = &mut out[ch * d * h * w..(ch + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let base = ((z / factor) * h + y / factor) * w;
                for x in 0..ow {
                    dst[base + x / factor] += src[(z * oh + y) * ow + x];
                }
            }
        }
    }
    Tensor::new(vec![c, d, h, w], out).expect("shape")
}

pub fn downsample_avg_forward<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(input, factor, "downsample_avg", true)?;
    let scale = T::from_f64(1.0 / (factor * factor * factor) as f64);
    Ok(block_sum(input, factor).map(|v| v * scale))
}

pub fn downsample_avg_backward<T: Real>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let scale = T::from_f64(1.0 / (factor * factor * factor) as f64);
    upsample_nearest_forward(grad, factor)
        .expect("validated in forward")
        .map(|v| v * scale)
}

/// Mean squared error, accumulated in `f64`.
pub fn mse_forward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target, "mse_loss")?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(T::from_f64(sum / pred.len() as f64))
}

pub fn mse_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, grad_out: T) -> Tensor<T> {
    let scale = 2.0 * grad_out.as_f64() / pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| T::from_f64((p.as_f64() - t.as_f64()) * scale))
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("shape")
}
