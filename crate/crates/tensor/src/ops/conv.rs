//! 2-D convolution over `[B, C, H, W]` via im2col and GEMM.
//!
//! Three kernels form a closed family under differentiation: the forward
//! convolution, its input adjoint (the transposed convolution) and its
//! weight adjoint. Each one's vector-Jacobian products are expressed with the
//! other two, which is what makes convolutions twice differentiable.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardCtx, BackwardOp, Tensor};

/// Spatial padding rule of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(input / stride)`, padding split evenly with the
    /// odd pixel at the bottom/right.
    Same,
    /// No padding.
    Valid,
    Explicit {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

fn resolve_axis(input: usize, k: usize, stride: usize, padding: Padding, vertical: bool) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= k).then(|| ((input - k) / stride + 1, 0)),
        Padding::Explicit {
            top,
            bottom,
            left,
            right,
        } => {
            let (before, after) = if vertical { (top, bottom) } else { (left, right) };
            let padded = input + before + after;
            (padded >= k).then(|| ((padded - k) / stride + 1, before))
        }
    }
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], w: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (&[b, cin, h, wd], &[cout, wcin, kh, kw]) = (x, w) else {
            return Err(TensorError::mismatch("conv2d", x, w));
        };
        if cin != wcin {
            return Err(TensorError::mismatch("conv2d", x, w));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let too_small = || TensorError::invalid("conv2d", format!("input {x:?} smaller than kernel {kh}×{kw}"));
        let (oh, pad_top) = resolve_axis(h, kh, stride, padding, true).ok_or_else(too_small)?;
        let (ow, pad_left) = resolve_axis(wd, kw, stride, padding, false).ok_or_else(too_small)?;
        Ok(ConvGeom {
            b,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn x_shape(&self) -> Vec<usize> {
        vec![self.b, self.cin, self.h, self.w]
    }

    fn w_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kh, self.kw]
    }

    fn y_shape(&self) -> Vec<usize> {
        vec![self.b, self.cout, self.oh, self.ow]
    }

    /// Source offset within one input plane for each (tap, output pixel),
    /// or `None` where the tap falls into padding.
    #[cfg(test)]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
        (iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w)
            .then(|| iy as usize * self.w + ix as usize)
    }
}

/// Output columns `[lo, hi)` whose tap `k` lands inside an input row of
/// length `n`.
fn valid_range(out: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o·stride + k − pad
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    let s = g.stride;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, ky, s, g.pad_top);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, kx, s, g.pad_left);
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    let src = &plane[(oy * s + ky - g.pad_top) * g.w..][..g.w];
                    let first = xlo * s + kx - g.pad_left;
                    if s == 1 {
                        dst[xlo..xhi].copy_from_slice(&src[first..first + xhi - xlo]);
                    } else {
                        for (d, ox) in dst[xlo..xhi].iter_mut().zip(0..) {
                            *d = src[first + ox * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.p();
    let s = g.stride;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, ky, s, g.pad_top);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, kx, s, g.pad_left);
                if xlo >= xhi {
                    continue;
                }
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in ylo..yhi {
                    let src = &row[oy * g.ow + xlo..oy * g.ow + xhi];
                    let dst = &mut plane[(oy * s + ky - g.pad_top) * g.w..][..g.w];
                    let first = xlo * s + kx - g.pad_left;
                    for (ox, &v) in src.iter().enumerate() {
                        let d = &mut dst[first + ox * s];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.b * g.cout * p];
    let mut cols = vec![T::zero(); k * p];
    for bi in 0..g.b {
        im2col(g, &x[bi * g.cin * g.h * g.w..], &mut cols);
        let y = &mut out[bi * g.cout * p..(bi + 1) * g.cout * p];
        T::gemm(g.cout, k, p, T::one(), w, k as isize, 1, &cols, p as isize, 1, T::zero(), y, p as isize, 1);
    }
    out
}

fn conv_input_grad<T: Scalar>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let plane = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); g.b * plane];
    let mut cols = vec![T::zero(); k * p];
    for bi in 0..g.b {
        let gyb = &gy[bi * g.cout * p..(bi + 1) * g.cout * p];
        // cols = wᵀ · gy
        T::gemm(k, g.cout, p, T::one(), w, 1, k as isize, gyb, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
        col2im(g, &cols, &mut dx[bi * plane..(bi + 1) * plane]);
    }
    dx
}

fn conv_weight_grad<T: Scalar>(g: &ConvGeom, x: &[T], gy: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut dw = vec![T::zero(); g.cout * k];
    let mut cols = vec![T::zero(); k * p];
    for bi in 0..g.b {
        im2col(g, &x[bi * g.cin * g.h * g.w..], &mut cols);
        let gyb = &gy[bi * g.cout * p..(bi + 1) * g.cout * p];
        // dw += gy · colsᵀ
        T::gemm(g.cout, p, k, T::one(), gyb, p as isize, 1, &cols, 1, p as isize, T::one(), &mut dw, k as isize, 1);
    }
    dw
}

struct Conv2d(ConvGeom);
struct ConvInputGrad(ConvGeom);
struct ConvWeightGrad(ConvGeom);

impl<T: Scalar> BackwardOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        Ok(vec![
            ctx.needs(0).then(|| input_grad(g, w, self.0)),
            ctx.needs(1).then(|| weight_grad(x, g, self.0)),
        ])
    }
}

impl<T: Scalar> BackwardOp<T> for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (gy, w, gbar) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        Ok(vec![
            ctx.needs(0).then(|| forward(gbar, w, self.0)),
            ctx.needs(1).then(|| weight_grad(gbar, gy, self.0)),
        ])
    }
}

impl<T: Scalar> BackwardOp<T> for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gy, wbar) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        Ok(vec![
            ctx.needs(0).then(|| input_grad(gy, wbar, self.0)),
            ctx.needs(1).then(|| forward(x, wbar, self.0)),
        ])
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let y = conv_forward(&g, x.data(), w.data());
    Tensor::record(y, g.y_shape(), &[x, w], Conv2d(g))
}

fn input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let dx = conv_input_grad(&g, gy.data(), w.data());
    Tensor::record(dx, g.x_shape(), &[gy, w], ConvInputGrad(g))
}

fn weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let dw = conv_weight_grad(&g, x.data(), gy.data());
    Tensor::record(dw, g.w_shape(), &[x, gy], ConvWeightGrad(g))
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `[B, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
        let g = ConvGeom::new(self.shape(), weight.shape(), stride, padding)?;
        Ok(forward(self, weight, g))
    }

    /// Transposed convolution: the adjoint of a same-padded strided
    /// convolution. Input `[B, Cin, H, W]`, weights `[Cin, Cout, kh, kw]`,
    /// output `[B, Cout, H·stride, W·stride]`.
    pub fn conv_transpose2d(&self, weight: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        let (&[b, cin, h, w], &[wcin, cout, kh, kw]) = (self.shape(), weight.shape()) else {
            return Err(TensorError::mismatch("conv_transpose2d", self.shape(), weight.shape()));
        };
        if cin != wcin {
            return Err(TensorError::mismatch("conv_transpose2d", self.shape(), weight.shape()));
        }
        let g = ConvGeom::new(&[b, cout, h * stride, w * stride], &[cin, cout, kh, kw], stride, Padding::Same)?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        Ok(input_grad(self, weight, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_matches_per_tap_lookup() {
        let paddings = [
            Padding::Same,
            Padding::Valid,
            Padding::Explicit {
                top: 0,
                bottom: 3,
                left: 0,
                right: 2,
            },
            Padding::Explicit {
                top: 2,
                bottom: 1,
                left: 3,
                right: 0,
            },
        ];
        for (h, w) in [(1, 1), (3, 7), (6, 5), (9, 4)] {
            for k in [1, 2, 3, 5] {
                for stride in [1, 2, 3] {
                    for padding in paddings {
                        let Ok(g) = ConvGeom::new(&[1, 2, h, w], &[1, 2, k, k], stride, padding) else {
                            continue;
                        };
                        let x: Vec<f64> = (0..2 * h * w).map(|v| v as f64 + 1.0).collect();
                        let mut cols = vec![f64::NAN; g.k() * g.p()];
                        im2col(&g, &x, &mut cols);
                        let mut back = vec![0.0; x.len()];
                        col2im(&g, &cols, &mut back);
                        let mut want_back = vec![0.0; x.len()];
                        for ci in 0..2 {
                            for ky in 0..k {
                                for kx in 0..k {
                                    for oy in 0..g.oh {
                                        for ox in 0..g.ow {
                                            let got = cols[((ci * k + ky) * k + kx) * g.p() + oy * g.ow + ox];
                                            let want = g.source(ky, kx, oy, ox).map_or(0.0, |s| x[ci * h * w + s]);
                                            assert_eq!(got, want, "{h}x{w} k{k} s{stride} {padding:?}");
                                            if let Some(s) = g.source(ky, kx, oy, ox) {
                                                want_back[ci * h * w + s] += got;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        assert_eq!(back, want_back);
                    }
                }
            }
        }
    }

    #[test]
    fn same_padding_output_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 416, 128]);
        let w = Tensor::<f32>::zeros(&[16, 3, 5, 5]);
        assert_eq!(x.conv2d(&w, 2, Padding::Same).unwrap().shape(), &[1, 16, 208, 64]);
    }

    #[test]
    fn valid_padding_output_shape() {
        let x = Tensor::<f32>::zeros(&[1, 128, 26, 8]);
        let w = Tensor::<f32>::zeros(&[1, 128, 4, 4]);
        assert_eq!(x.conv2d(&w, 1, Padding::Valid).unwrap().shape(), &[1, 1, 23, 5]);
        let tiny = Tensor::<f32>::zeros(&[1, 128, 2, 8]);
        assert!(tiny.conv2d(&w, 1, Padding::Valid).is_err());
    }

    #[test]
    fn matches_direct_convolution() {
        let xs: Vec<f64> = (0..2 * 2 * 5 * 4).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let ws: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| ((v * 5) % 7) as f64 - 3.0).collect();
        let x = Tensor::<f64>::from_vec(xs.clone(), &[2, 2, 5, 4]).unwrap();
        let w = Tensor::<f64>::from_vec(ws.clone(), &[3, 2, 3, 3]).unwrap();
        let y = x.conv2d(&w, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
        // padding total rows = (3-1)*2+3-5 = 2 → top 1; cols = (2-1)*2+3-4 = 1 → left 0
        for b in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize;
                                    if iy < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    acc += xs[((b * 2 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                        * ws[((o * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + o) * 3 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_conv_upsamples() {
        let x = Tensor::<f64>::ones(&[1, 4, 3, 5]);
        let w = Tensor::<f64>::ones(&[4, 2, 3, 3]);
        assert_eq!(x.conv_transpose2d(&w, 2).unwrap().shape(), &[1, 2, 6, 10]);
    }
}
