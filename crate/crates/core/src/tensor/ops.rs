//! Non-convolutional kernels: bilinear upsampling, batch normalization,
//! PReLU, channel merges, 2x average pooling.

use super::{check_same_shape, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Bilinear upsampling (half-pixel centres, edge-clamped)
// ---------------------------------------------------------------------------

/// Per-output-index source taps `(i0, i1, frac)` for one axis.
fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Upsample by an integer `factor` with half-pixel-centre bilinear
/// interpolation (`src = (dst + 0.5)/factor - 0.5`, clamped at the border).
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::InvalidValue(format!(
            "bilinear factor must be >= 1, got {factor}"
        )));
    }
    let s = input.shape();
    let ty = bilinear_taps(s.h, factor);
    let tx = bilinear_taps(s.w, factor);
    let (oh, ow) = (s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(s.with_hw(oh, ow));
    let dst = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let base = (n * s.c + c) * oh * ow;
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::cst(fy);
                let gy = T::one() - fy;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::cst(fx);
                    let gx = T::one() - fx;
                    let top = src[y0 * s.w + x0] * gx + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * gx + src[y1 * s.w + x1] * fx;
                    dst[base + oy * ow + ox] = top * gy + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_backward<T: Scalar>(gy: &Tensor<T>, in_shape: Shape, factor: usize) -> Tensor<T> {
    let ty = bilinear_taps(in_shape.h, factor);
    let tx = bilinear_taps(in_shape.w, factor);
    let g = gy.shape();
    let mut out = Tensor::zeros(in_shape);
    let w = in_shape.w;
    for n in 0..g.n {
        for c in 0..g.c {
            let src = gy.plane(n, c);
            let base = (n * in_shape.c + c) * in_shape.plane();
            let dst = &mut out.data_mut()[base..base + in_shape.plane()];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::cst(fy);
                let gyw = T::one() - fy;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::cst(fx);
                    let gxw = T::one() - fx;
                    let v = src[oy * g.w + ox];
                    dst[y0 * w + x0] += v * gyw * gxw;
                    dst[y0 * w + x1] += v * gyw * fx;
                    dst[y1 * w + x0] += v * fy * gxw;
                    dst[y1 * w + x1] += v * fy * fx;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 2x2 average pooling (image pyramid for insertion)
// ---------------------------------------------------------------------------

/// Mean over non-overlapping 2x2 windows; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::InvalidValue(format!(
            "avg_pool2 needs spatial dims >= 2, got {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let q = T::cst(0.25);
    let mut out = Tensor::zeros(s.with_hw(oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * s.w + 2 * x;
                    let v = (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]) * q;
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(gy: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let g = gy.shape();
    let q = T::cst(0.25);
    let mut out = Tensor::zeros(in_shape);
    for n in 0..g.n {
        for c in 0..g.c {
            for y in 0..g.h {
                for x in 0..g.w {
                    let v = gy.at(n, c, y, x) * q;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        out.set(n, c, 2 * y + dy, 2 * x + dx, v);
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    /// Unbiased batch variance is folded in during training.
    pub running_var: Vec<T>,
    pub epsilon: T,
    /// Weight of the new batch statistic in the running average.
    pub momentum: T,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma=1, beta=0, mean=0, var=1, eps=1e-5, momentum=0.1.
    pub fn identity(channels: usize, mode: BnMode) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::cst(1e-5),
            momentum: T::cst(0.1),
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel batch statistics: (mean, biased variance).
pub(crate) fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::cst((s.n * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Per-channel affine map `y = x * scale[c] + shift[c]`.
pub(crate) fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
        let c = i % s.c;
        let (a, b) = (scale[c], shift[c]);
        for v in chunk {
            *v = *v * a + b;
        }
    }
    out
}

/// Training-mode normalization. Returns `(y, mean, inv_std, biased_var)`.
pub(crate) fn bn_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>, Vec<T>)> {
    let s = x.shape();
    if s.n * s.plane() < 2 {
        return Err(Error::InvalidValue(
            "batch_norm in train mode needs more than one value per channel".into(),
        ));
    }
    let (mean, var) = channel_moments(x);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let scale: Vec<T> = gamma.iter().zip(&inv_std).map(|(&g, &i)| g * i).collect();
    let shift: Vec<T> = (0..s.c).map(|c| beta[c] - mean[c] * scale[c]).collect();
    Ok((channel_affine(x, &scale, &shift), mean, inv_std, var))
}

/// Exact batch-statistics gradient. Returns `(gx, ggamma, gbeta)`.
pub(crate) fn bn_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::cst((s.n * s.plane()) as f64);
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (m, is) = (mean[c], inv_std[c]);
        for n in 0..s.n {
            for (&g, &v) in gy.plane(n, c).iter().zip(x.plane(n, c)) {
                gbeta[c] += g;
                ggamma[c] += g * (v - m) * is;
            }
        }
    }
    let mut gx = Tensor::zeros(s);
    let p = s.plane();
    for (i, chunk) in gx.data_mut().chunks_mut(p).enumerate() {
        let n = i / s.c;
        let c = i % s.c;
        let (m, is) = (mean[c], inv_std[c]);
        let k = gamma[c] * is / count;
        let gy_p = gy.plane(n, c);
        let x_p = x.plane(n, c);
        for ((d, &g), &v) in chunk.iter_mut().zip(gy_p).zip(x_p) {
            let xhat = (v - m) * is;
            *d = k * (count * g - gbeta[c] - xhat * ggamma[c]);
        }
    }
    (gx, ggamma, gbeta)
}

/// Batch normalization. In train mode the running statistics in `params`
/// are updated in place; that is the only mutation any kernel performs.
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, params: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if params.channels() != s.c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            dim: "channels",
            expected: params.channels(),
            actual: s.c,
        });
    }
    match params.mode {
        BnMode::Train => {
            let (y, mean, _, var) = bn_train_forward(input, &params.gamma, &params.beta, params.epsilon)?;
            update_running(params, &mean, &var, s.n * s.plane());
            Ok(y)
        }
        BnMode::Infer => Ok(bn_infer(
            input,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
            params.epsilon,
        )),
    }
}

fn update_running<T: Scalar>(params: &mut BatchNormParams<T>, mean: &[T], var: &[T], count: usize) {
    let m = params.momentum;
    let unbias = T::cst(count as f64 / (count as f64 - 1.0));
    for c in 0..mean.len() {
        params.running_mean[c] = (T::one() - m) * params.running_mean[c] + m * mean[c];
        params.running_var[c] = (T::one() - m) * params.running_var[c] + m * var[c] * unbias;
    }
}

pub(crate) fn bn_infer_scale<T: Scalar>(gamma: &[T], var: &[T], eps: T) -> Vec<T> {
    gamma.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect()
}

pub(crate) fn bn_infer<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: T) -> Tensor<T> {
    let scale = bn_infer_scale(gamma, var, eps);
    let shift: Vec<T> = (0..scale.len()).map(|c| beta[c] - mean[c] * scale[c]).collect();
    channel_affine(x, &scale, &shift)
}

// ---------------------------------------------------------------------------
// PReLU
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PReluParams<T> {
    pub slope: Vec<T>,
}

pub fn prelu<T: Scalar>(input: &Tensor<T>, params: &PReluParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if params.slope.len() != s.c {
        return Err(Error::ShapeMismatch {
            op: "prelu",
            dim: "channels",
            expected: params.slope.len(),
            actual: s.c,
        });
    }
    Ok(prelu_raw(input, &params.slope))
}

pub(crate) fn prelu_raw<T: Scalar>(x: &Tensor<T>, slope: &[T]) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let a = slope[i % s.c];
        for v in chunk {
            if *v < T::zero() {
                *v = *v * a;
            }
        }
    }
    out
}

/// Returns `(gx, gslope)`.
pub(crate) fn prelu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, slope: &[T]) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let mut gx = gy.clone();
    let mut gs = vec![T::zero(); s.c];
    for (i, chunk) in gx.data_mut().chunks_mut(s.plane()).enumerate() {
        let c = i % s.c;
        let xp = x.plane(i / s.c, c);
        for (g, &v) in chunk.iter_mut().zip(xp) {
            if v < T::zero() {
                gs[c] += *g * v;
                *g = *g * slope[c];
            }
        }
    }
    (gx, gs)
}

// ---------------------------------------------------------------------------
// Merges
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    Add,
    Concat,
}

pub fn merge<T: Scalar>(inputs: &[&Tensor<T>], mode: MergeMode) -> Result<Tensor<T>> {
    match mode {
        MergeMode::Add => add(inputs),
        MergeMode::Concat => concat(inputs),
    }
}

pub fn add<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = inputs
        .split_first()
        .ok_or_else(|| Error::InvalidValue("add needs at least one input".into()))?;
    let mut out = (*first).clone();
    for t in rest {
        out.add_assign(t).map_err(|e| match e {
            Error::ShapeMismatch { dim, expected, actual, .. } => Error::ShapeMismatch {
                op: "add",
                dim,
                expected,
                actual,
            },
            e => e,
        })?;
    }
    Ok(out)
}

/// Channel concatenation in argument order.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidValue("concat needs at least one input".into()))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        check_same_shape("concat", first.with_c(1), s.with_c(1))?;
        channels += s.c;
    }
    let out_shape = first.with_c(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            let s = t.shape();
            let block = s.c * s.plane();
            data.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::InvalidValue(format!(
            "channel slice [{start}, {}) out of range for {} channels",
            start + len,
            s.c
        )));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&input.data()[base..base + len * p]);
    }
    Tensor::from_vec(s.with_c(len), data)
}

/// Per-pixel argmax over channels; ties go to the lowest channel index.
/// Result is indexed `[n][y*w + x]`.
pub fn argmax_channels<T: Scalar>(input: &Tensor<T>) -> Vec<Vec<usize>> {
    let s = input.shape();
    (0..s.n)
        .map(|n| {
            (0..s.plane())
                .map(|i| {
                    let mut best = 0;
                    let mut best_v = input.plane(n, 0)[i];
                    for c in 1..s.c {
                        let v = input.plane(n, c)[i];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}
