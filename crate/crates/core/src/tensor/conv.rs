//! Dilated, strided, asymmetric 2-D convolution (cross-correlation) and its
//! adjoint.
//!
//! The three raw kernels below cover both directions of both ops:
//!
//! | op                  | forward          | grad input        | grad weight           |
//! |---------------------|------------------|-------------------|-----------------------|
//! | conv2d              | `gather`         | `scatter`         | `weight_grad(x, gy)`  |
//! | transposed_conv2d   | `scatter`        | `gather`          | `weight_grad(gy, x)`  |
//!
//! Each output plane is owned by exactly one task, so results do not depend
//! on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    /// Whether the owning layer adds a per-channel bias after the linear map.
    /// The kernels themselves are bias-free.
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride 1, dilation 1, no padding, no bias.
    pub fn new(c_in: usize, c_out: usize, kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel_h,
            kernel_w,
            stride: 1,
            dilation: 1,
            pad_h: 0,
            pad_w: 0,
            has_bias: false,
        }
    }

    /// Shape-preserving (at stride 1) padding `d*(k-1)/2` per axis.
    pub fn same(c_in: usize, c_out: usize, kernel_h: usize, kernel_w: usize, dilation: usize) -> Self {
        ConvSpec::new(c_in, c_out, kernel_h, kernel_w)
            .with_dilation(dilation)
            .with_same_padding()
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub fn with_same_padding(mut self) -> Self {
        self.pad_h = self.dilation * (self.kernel_h.saturating_sub(1)) / 2;
        self.pad_w = self.dilation * (self.kernel_w.saturating_sub(1)) / 2;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("dilation", self.dilation),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Dilated extent `d*(k-1)+1` per axis.
    pub fn footprint(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel_h - 1) + 1,
            self.dilation * (self.kernel_w - 1) + 1,
        )
    }

    /// `floor((in + 2*pad - d*(k-1) - 1)/stride) + 1` per axis.
    pub fn out_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (fh, fw) = self.footprint();
        let axis = |len: usize, pad: usize, foot: usize, name: &'static str| {
            let padded = len + 2 * pad;
            if foot > padded {
                return Err(Error::FootprintTooLarge {
                    op: "conv2d",
                    axis: name,
                    footprint: foot,
                    padded,
                });
            }
            Ok((padded - foot) / self.stride + 1)
        };
        Ok((
            axis(in_h, self.pad_h, fh, "height")?,
            axis(in_w, self.pad_w, fw, "width")?,
        ))
    }

    /// `(in-1)*stride - 2*pad + d*(k-1) + 1` per axis.
    pub fn transposed_out_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (fh, fw) = self.footprint();
        let axis = |len: usize, pad: usize, foot: usize| {
            let full = (len - 1) * self.stride + foot;
            if 2 * pad >= full {
                return Err(Error::InvalidSpec(format!(
                    "transposed conv padding {pad} leaves no output for input extent {len}"
                )));
            }
            Ok(full - 2 * pad)
        };
        Ok((axis(in_h, self.pad_h, fh)?, axis(in_w, self.pad_w, fw)?))
    }

    /// `(c_out, c_in, kh, kw)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.kernel_h, self.kernel_w)
    }

    /// `(c_in, c_out, kh, kw)`, the layout used by [`transposed_conv2d`].
    pub fn transposed_weight_shape(&self) -> Shape {
        Shape::new(self.c_in, self.c_out, self.kernel_h, self.kernel_w)
    }

    /// Weights only: `c_in * c_out * kh * kw`.
    pub fn weight_count(&self) -> usize {
        self.c_in * self.c_out * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.c_out } else { 0 }
    }

    /// Spec of the forward conv whose adjoint is this transposed conv.
    fn adjoint(&self) -> ConvSpec {
        ConvSpec {
            c_in: self.c_out,
            c_out: self.c_in,
            ..*self
        }
    }
}

fn check_dim(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            dim,
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_weights(op: &'static str, weights: Shape, expected: Shape) -> Result<()> {
    check_dim(op, "weight dim 0", expected.n, weights.n)?;
    check_dim(op, "weight dim 1", expected.c, weights.c)?;
    check_dim(op, "kernel_h", expected.h, weights.h)?;
    check_dim(op, "kernel_w", expected.w, weights.w)
}

/// Cross-correlation over the dilated footprint with zero padding.
/// `weights` has shape `(c_out, c_in, kernel_h, kernel_w)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = input.shape();
    check_dim("conv2d", "input channels", spec.c_in, s.c)?;
    check_weights("conv2d", weights.shape(), spec.weight_shape())?;
    let (oh, ow) = spec.out_size(s.h, s.w)?;
    Ok(gather(input, weights, spec, oh, ow))
}

/// Adjoint of [`conv2d`]. `weights` has shape `(c_in, c_out, kernel_h, kernel_w)`
/// so that the same array serves a forward conv from `c_out` to `c_in`
/// channels.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = input.shape();
    check_dim("transposed_conv2d", "input channels", spec.c_in, s.c)?;
    check_weights("transposed_conv2d", weights.shape(), spec.transposed_weight_shape())?;
    let (oh, ow) = spec.transposed_out_size(s.h, s.w)?;
    Ok(scatter(input, weights, &spec.adjoint(), oh, ow))
}

/// Reference convolution: six explicit loops, bounds checked per tap.
pub fn conv2d_oracle<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = input.shape();
    check_dim("conv2d_oracle", "input channels", spec.c_in, s.c)?;
    check_weights("conv2d_oracle", weights.shape(), spec.weight_shape())?;
    let (oh, ow) = spec.out_size(s.h, s.w)?;
    let mut out = Tensor::zeros(Shape::new(s.n, spec.c_out, oh, ow));
    for n in 0..s.n {
        for co in 0..spec.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..spec.c_in {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.pad_h as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += weights.at(co, ci, ky, kx)
                                    * input.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Output indices `o` in `[lo, hi)` with `0 <= o*stride + offset < in_len`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(out_len);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// Forward conv into an explicit `(oh, ow)` output.
pub(crate) fn gather<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let s = x.shape();
    let (ih, iw) = (s.h, s.w);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let stride = spec.stride;
    let c_in = spec.c_in;
    let mut out = Tensor::zeros(Shape::new(s.n, spec.c_out, oh, ow));
    let wdata = w.data();
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let n = plane / spec.c_out;
            let co = plane % spec.c_out;
            for ci in 0..c_in {
                let src = x.plane(n, ci);
                for ky in 0..kh {
                    let off_y = (ky * spec.dilation) as isize - spec.pad_h as isize;
                    let (y0, y1) = valid_range(off_y, stride, ih, oh);
                    for kx in 0..kw {
                        let wv = wdata[((co * c_in + ci) * kh + ky) * kw + kx];
                        let off_x = (kx * spec.dilation) as isize - spec.pad_w as isize;
                        let (x0, x1) = valid_range(off_x, stride, iw, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy * stride) as isize + off_y;
                            let row = &src[iy as usize * iw..(iy as usize + 1) * iw];
                            let orow = &mut dst[oy * ow + x0..oy * ow + x1];
                            let ix0 = (x0 * stride) as isize + off_x;
                            if stride == 1 {
                                let irow = &row[ix0 as usize..ix0 as usize + (x1 - x0)];
                                for (o, &v) in orow.iter_mut().zip(irow) {
                                    *o += wv * v;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * row[ix0 as usize + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Adjoint of [`gather`]: maps `(n, c_out, oh, ow)` back to `(n, c_in, ih, iw)`.
pub(crate) fn scatter<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    ih: usize,
    iw: usize,
) -> Tensor<T> {
    let s = gy.shape();
    let (oh, ow) = (s.h, s.w);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let stride = spec.stride;
    let (c_in, c_out) = (spec.c_in, spec.c_out);
    let mut out = Tensor::zeros(Shape::new(s.n, c_in, ih, iw));
    let wdata = w.data();
    out.data_mut()
        .par_chunks_mut(ih * iw)
        .enumerate()
        .for_each(|(plane, dst)| {
            let n = plane / c_in;
            let ci = plane % c_in;
            for co in 0..c_out {
                let src = gy.plane(n, co);
                for ky in 0..kh {
                    let off_y = (ky * spec.dilation) as isize - spec.pad_h as isize;
                    let (y0, y1) = valid_range(off_y, stride, ih, oh);
                    for kx in 0..kw {
                        let wv = wdata[((co * c_in + ci) * kh + ky) * kw + kx];
                        let off_x = (kx * spec.dilation) as isize - spec.pad_w as isize;
                        let (x0, x1) = valid_range(off_x, stride, iw, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = ((oy * stride) as isize + off_y) as usize;
                            let grow = &src[oy * ow + x0..oy * ow + x1];
                            let ix0 = ((x0 * stride) as isize + off_x) as usize;
                            let drow = &mut dst[iy * iw..(iy + 1) * iw];
                            if stride == 1 {
                                for (d, &g) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            } else {
                                for (j, &g) in grow.iter().enumerate() {
                                    drow[ix0 + j * stride] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// d(loss)/d(weights) of [`gather`], shape `(c_out, c_in, kh, kw)`.
pub(crate) fn weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let s = x.shape();
    let g = gy.shape();
    let (ih, iw) = (s.h, s.w);
    let (oh, ow) = (g.h, g.w);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let stride = spec.stride;
    let c_in = spec.c_in;
    let mut out = Tensor::zeros(spec.weight_shape());
    out.data_mut()
        .par_chunks_mut(c_in * kh * kw)
        .enumerate()
        .for_each(|(co, dst)| {
            for ci in 0..c_in {
                for ky in 0..kh {
                    let off_y = (ky * spec.dilation) as isize - spec.pad_h as isize;
                    let (y0, y1) = valid_range(off_y, stride, ih, oh);
                    for kx in 0..kw {
                        let off_x = (kx * spec.dilation) as isize - spec.pad_w as isize;
                        let (x0, x1) = valid_range(off_x, stride, iw, ow);
                        let mut acc = T::zero();
                        if x0 < x1 {
                            for n in 0..s.n {
                                let src = x.plane(n, ci);
                                let grad = gy.plane(n, co);
                                for oy in y0..y1 {
                                    let iy = ((oy * stride) as isize + off_y) as usize;
                                    let grow = &grad[oy * ow + x0..oy * ow + x1];
                                    let ix0 = ((x0 * stride) as isize + off_x) as usize;
                                    let irow = &src[iy * iw..(iy + 1) * iw];
                                    if stride == 1 {
                                        for (&a, &b) in grow.iter().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                            acc += a * b;
                                        }
                                    } else {
                                        for (j, &a) in grow.iter().enumerate() {
                                            acc += a * irow[ix0 + j * stride];
                                        }
                                    }
                                }
                            }
                        }
                        dst[(ci * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });
    out
}

/// Backward of [`transposed_conv2d`]: returns `(grad_input, grad_weights)`.
pub(crate) fn transposed_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: &ConvSpec,
) -> (Tensor<T>, Tensor<T>) {
    let adj = spec.adjoint();
    let s = x.shape();
    let gx = gather(gy, w, &adj, s.h, s.w);
    // The forward treated `x` as the output-side gradient of `adj`.
    let gw = weight_grad(gy, x, &adj);
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_1x1() {
        let mut r = rng(1);
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 1, 4, 5), -1.0, 1.0, &mut r);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let y = conv2d(&x, &w, &ConvSpec::new(1, 1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = rng(2);
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 5, 5));
        let spec = ConvSpec::same(2, 3, 3, 3, 1);
        let w = Tensor::random_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let y = conv2d_oracle(&x, &w, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        // Cross-correlation of a centred delta reads the kernel back in
        // reversed index order around the centre.
        let spec = ConvSpec::same(1, 1, 3, 3, 1);
        let w = Tensor::<f64>::from_fn(spec.weight_shape(), |_, _, y, x| (y * 3 + x + 1) as f64);
        let mut x = Tensor::zeros(Shape::new(1, 1, 5, 5));
        x.set(0, 0, 2, 2, 1.0);
        for out in [conv2d_oracle(&x, &w, &spec).unwrap(), conv2d(&x, &w, &spec).unwrap()] {
            for dy in 0..3 {
                for dx in 0..3 {
                    assert_eq!(out.at(0, 0, 1 + dy, 1 + dx), w.at(0, 0, 2 - dy, 2 - dx));
                }
            }
        }
    }

    #[test]
    fn dilation_16_impulse_spans_33() {
        let spec = ConvSpec::same(1, 1, 3, 3, 16);
        let w = Tensor::<f64>::full(spec.weight_shape(), 1.0);
        let mut x = Tensor::zeros(Shape::new(1, 1, 41, 41));
        x.set(0, 0, 20, 20, 1.0);
        let y = conv2d(&x, &w, &spec).unwrap();
        let mut ys = vec![];
        let mut xs = vec![];
        for yy in 0..41 {
            for xx in 0..41 {
                if y.at(0, 0, yy, xx) != 0.0 {
                    ys.push(yy);
                    xs.push(xx);
                }
            }
        }
        assert_eq!(ys.len(), 9);
        assert_eq!(ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1, 33);
        assert_eq!(xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1, 33);
    }

    #[test]
    fn random_5x5_matches_oracle() {
        let mut r = rng(3);
        let spec = ConvSpec::new(1, 1, 3, 3).with_padding(1, 1);
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 1, 5, 5), -1.0, 1.0, &mut r);
        let w = Tensor::random_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let fast = conv2d(&x, &w, &spec).unwrap();
        let slow = conv2d_oracle(&x, &w, &spec).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-6);
    }

    #[test]
    fn shape_formula_per_axis() {
        let spec = ConvSpec::new(1, 1, 3, 1).with_dilation(4).with_padding(4, 0).with_stride(2);
        assert_eq!(spec.out_size(17, 9).unwrap(), (9, 5));
        let spec = ConvSpec::same(1, 1, 3, 3, 2);
        assert_eq!(spec.out_size(7, 8).unwrap(), (7, 8));
    }

    #[test]
    fn channel_mismatch_names_dim() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let spec = ConvSpec::new(2, 1, 1, 1);
        let w = Tensor::zeros(spec.weight_shape());
        match conv2d(&x, &w, &spec).unwrap_err() {
            Error::ShapeMismatch { dim, expected, actual, .. } => {
                assert_eq!((dim, expected, actual), ("input channels", 2, 3));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn footprint_larger_than_padded_input_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let spec = ConvSpec::new(1, 1, 3, 3).with_dilation(4);
        let w = Tensor::zeros(spec.weight_shape());
        assert!(matches!(
            conv2d(&x, &w, &spec),
            Err(Error::FootprintTooLarge { footprint: 9, padded: 4, .. })
        ));
    }

    #[test]
    fn transposed_upsampler_shape() {
        let spec = ConvSpec::new(2, 3, 2, 2).with_stride(2);
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 64, 128));
        let w = Tensor::zeros(spec.transposed_weight_shape());
        let y = transposed_conv2d(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 128, 256));
    }

    #[test]
    fn transposed_1x1_is_channel_mixing() {
        let mut r = rng(4);
        let spec = ConvSpec::new(3, 3, 1, 1);
        let x = Tensor::<f64>::random_uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut r);
        let w = Tensor::random_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        // Transposed weights (c_in, c_out) hold the transpose of the mixing matrix.
        let wt = Tensor::from_fn(spec.weight_shape(), |o, i, _, _| w.at(i, o, 0, 0));
        let a = transposed_conv2d(&x, &wt, &spec).unwrap();
        let b = conv2d(&x, &w, &spec).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn transposed_rejects_zero_stride() {
        let spec = ConvSpec::new(1, 1, 2, 2).with_stride(0);
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(transposed_conv2d(&x, &w, &spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(-2, 1, 5, 5), (2, 5));
        assert_eq!(valid_range(2, 1, 5, 5), (0, 3));
        assert_eq!(valid_range(-1, 2, 5, 3), (1, 3));
        assert_eq!(valid_range(10, 1, 5, 5), (0, 0));
    }
}
