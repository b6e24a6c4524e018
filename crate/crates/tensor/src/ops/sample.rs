//! Bilinear sampling of `[B, C, H, W]` images at continuous pixel
//! coordinates, with zero contribution from taps outside the image.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardCtx, BackwardOp, Tensor};

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

/// Four taps of one sample: flat in-plane offsets (None when outside) and
/// the fractional position.
struct Taps<T> {
    idx: [Option<usize>; 4],
    fx: T,
    fy: T,
}

fn taps<T: Scalar>(d: &Dims, x: T, y: T) -> Taps<T> {
    if !x.is_finite() || !y.is_finite() {
        return Taps {
            idx: [None; 4],
            fx: T::zero(),
            fy: T::zero(),
        };
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0.to_f64_lossy(), y0.to_f64_lossy());
    let at = |yy: f64, xx: f64| {
        (yy >= 0.0 && xx >= 0.0 && yy < d.h as f64 && xx < d.w as f64).then(|| yy as usize * d.w + xx as usize)
    };
    Taps {
        idx: [at(y0, x0), at(y0, x0 + 1.0), at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0)],
        fx,
        fy,
    }
}

fn weights<T: Scalar>(t: &Taps<T>) -> [T; 4] {
    let (fx, fy, one) = (t.fx, t.fy, T::one());
    [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy]
}

fn dims(src: &[usize], coords: &[usize]) -> Result<Dims> {
    match (src, coords) {
        (&[b, c, h, w], &[cb, oh, ow, 2]) if b == cb => Ok(Dims { b, c, h, w, oh, ow }),
        _ => Err(TensorError::mismatch("bilinear_sample", src, coords)),
    }
}

fn for_each_sample<T: Scalar>(d: &Dims, coords: &[T], mut f: impl FnMut(usize, usize, &Taps<T>)) {
    for b in 0..d.b {
        for p in 0..d.oh * d.ow {
            let k = (b * d.oh * d.ow + p) * 2;
            let t = taps(d, coords[k], coords[k + 1]);
            f(b, p, &t);
        }
    }
}

fn sample_fwd<T: Scalar>(d: &Dims, src: &[T], coords: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); d.b * d.c * d.oh * d.ow];
    let (plane, oplane) = (d.h * d.w, d.oh * d.ow);
    for_each_sample(d, coords, |b, p, t| {
        let wts = weights(t);
        for ch in 0..d.c {
            let s = &src[(b * d.c + ch) * plane..][..plane];
            let mut acc = T::zero();
            for (i, w) in t.idx.iter().zip(wts) {
                if let Some(i) = i {
                    acc = acc + w * s[*i];
                }
            }
            out[(b * d.c + ch) * oplane + p] = acc;
        }
    });
    out
}

fn src_grad<T: Scalar>(d: &Dims, g: &[T], coords: &[T]) -> Vec<T> {
    let (plane, oplane) = (d.h * d.w, d.oh * d.ow);
    let mut out = vec![T::zero(); d.b * d.c * plane];
    for_each_sample(d, coords, |b, p, t| {
        let wts = weights(t);
        for ch in 0..d.c {
            let gv = g[(b * d.c + ch) * oplane + p];
            let s = &mut out[(b * d.c + ch) * plane..][..plane];
            for (i, w) in t.idx.iter().zip(wts) {
                if let Some(i) = i {
                    s[*i] = s[*i] + w * gv;
                }
            }
        }
    });
    out
}

fn coord_grad<T: Scalar>(d: &Dims, g: &[T], src: &[T], coords: &[T]) -> Vec<T> {
    let (plane, oplane) = (d.h * d.w, d.oh * d.ow);
    let mut out = vec![T::zero(); coords.len()];
    for_each_sample(d, coords, |b, p, t| {
        let one = T::one();
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for ch in 0..d.c {
            let s = &src[(b * d.c + ch) * plane..][..plane];
            let v = t.idx.map(|i| i.map_or(T::zero(), |i| s[i]));
            let gv = g[(b * d.c + ch) * oplane + p];
            gx = gx + gv * ((one - t.fy) * (v[1] - v[0]) + t.fy * (v[3] - v[2]));
            gy = gy + gv * ((one - t.fx) * (v[2] - v[0]) + t.fx * (v[3] - v[1]));
        }
        let k = (b * oplane + p) * 2;
        out[k] = gx;
        out[k + 1] = gy;
    });
    out
}

struct Sample(Dims);
struct SrcGrad(Dims);
struct CoordGrad;

impl<T: Scalar> BackwardOp<T> for Sample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (src, coords, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        Ok(vec![
            ctx.needs(0).then(|| sample_src_grad(g, coords, self.0)),
            ctx.needs(1).then(|| sample_coord_grad(g, src, coords, self.0)),
        ])
    }
}

impl<T: Scalar> BackwardOp<T> for SrcGrad {
    fn name(&self) -> &'static str {
        "bilinear_sample_src_grad"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        // Linear in g, and adjoint to the forward sampling.
        let (g, coords, sbar) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        Ok(vec![
            ctx.needs(0).then(|| sample(sbar, coords, self.0)),
            ctx.needs(1).then(|| sample_coord_grad(g, sbar, coords, self.0)),
        ])
    }
}

impl<T: Scalar> BackwardOp<T> for CoordGrad {
    fn name(&self) -> &'static str {
        "bilinear_sample_coord_grad"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Err(TensorError::Unsupported("bilinear_sample coordinates"))
    }
}

fn sample<T: Scalar>(src: &Tensor<T>, coords: &Tensor<T>, d: Dims) -> Tensor<T> {
    let out = sample_fwd(&d, src.data(), coords.data());
    Tensor::record(out, vec![d.b, d.c, d.oh, d.ow], &[src, coords], Sample(d))
}

fn sample_src_grad<T: Scalar>(g: &Tensor<T>, coords: &Tensor<T>, d: Dims) -> Tensor<T> {
    let out = src_grad(&d, g.data(), coords.data());
    Tensor::record(out, vec![d.b, d.c, d.h, d.w], &[g, coords], SrcGrad(d))
}

fn sample_coord_grad<T: Scalar>(g: &Tensor<T>, src: &Tensor<T>, coords: &Tensor<T>, d: Dims) -> Tensor<T> {
    let out = coord_grad(&d, g.data(), src.data(), coords.data());
    Tensor::record(out, coords.shape().to_vec(), &[g, src, coords], CoordGrad)
}

impl<T: Scalar> Tensor<T> {
    /// Samples this `[B, C, H, W]` image at `coords` of shape
    /// `[B, Ho, Wo, 2]`, holding `(column, row)` pixel positions. Taps
    /// outside the image read as zero.
    ///
    /// Differentiable with respect to both the image and the coordinates;
    /// second derivatives with respect to the coordinates are not provided.
    pub fn bilinear_sample(&self, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let d = dims(self.shape(), coords.shape())?;
        Ok(sample(self, coords, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coordinates_copy_pixels() {
        let img = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[1, 1, 2, 3]).unwrap();
        let coords = Tensor::from_vec(vec![2.0, 1.0, 0.0, 0.0, 0.5, 0.5, -1.0, 0.0], &[1, 1, 4, 2]).unwrap();
        let out = img.bilinear_sample(&coords).unwrap();
        // (x=0.5, y=0.5) averages 0, 1, 3, 4; (x=-1, y=0) only reaches pixel 0 with weight 0
        assert_eq!(out.data(), &[5.0, 0.0, 2.0, 0.0]);
    }
}
