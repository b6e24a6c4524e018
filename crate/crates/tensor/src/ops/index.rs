//! Index-driven data movement. Slicing, pooling, nearest upsampling, pixel
//! shuffle and transposition are all gathers over a precomputed index list;
//! their adjoint is a scatter-add over the same list, and vice versa, so the
//! family is closed under differentiation.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{numel_of, BackwardCtx, BackwardOp, Tensor};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

struct Gather {
    name: &'static str,
    idx: Arc<Vec<usize>>,
}

struct Scatter {
    name: &'static str,
    idx: Arc<Vec<usize>>,
}

impl<T: Scalar> BackwardOp<T> for Gather {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let shape = ctx.inputs[0].shape();
        Ok(vec![Some(scatter(ctx.grad, self.name, &self.idx, shape))])
    }
}

impl<T: Scalar> BackwardOp<T> for Scatter {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let shape = ctx.inputs[0].shape();
        Ok(vec![Some(gather(ctx.grad, self.name, &self.idx, shape))])
    }
}

/// `out[i] = x[idx[i]]`, reshaped to `out_shape`.
pub(crate) fn gather<T: Scalar>(
    x: &Tensor<T>,
    name: &'static str,
    idx: &Arc<Vec<usize>>,
    out_shape: &[usize],
) -> Tensor<T> {
    debug_assert_eq!(idx.len(), numel_of(out_shape));
    let src = x.data();
    let data = idx.iter().map(|&i| src[i]).collect();
    Tensor::record(
        data,
        out_shape.to_vec(),
        &[x],
        Gather {
            name,
            idx: Arc::clone(idx),
        },
    )
}

/// `out[idx[i]] += x[i]` into zeros of `out_shape`.
pub(crate) fn scatter<T: Scalar>(
    x: &Tensor<T>,
    name: &'static str,
    idx: &Arc<Vec<usize>>,
    out_shape: &[usize],
) -> Tensor<T> {
    debug_assert_eq!(idx.len(), x.numel());
    let mut data = vec![T::zero(); numel_of(out_shape)];
    for (&i, &v) in idx.iter().zip(x.data()) {
        data[i] = data[i] + v;
    }
    Tensor::record(
        data,
        out_shape.to_vec(),
        &[x],
        Scatter {
            name,
            idx: Arc::clone(idx),
        },
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn expect_4d(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(TensorError::invalid(op, format!("expected [B, C, H, W], got {shape:?}"))),
    }
}

struct Reshape;
impl<T: Scalar> BackwardOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape())?)])
    }
}

struct Concat {
    axis: usize,
}
impl<T: Scalar> BackwardOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let mut start = 0;
        let mut out = Vec::with_capacity(ctx.inputs.len());
        for (i, input) in ctx.inputs.iter().enumerate() {
            let len = input.dim(self.axis);
            out.push(if ctx.needs(i) {
                Some(ctx.grad.slice(self.axis, start, len)?)
            } else {
                None
            });
            start += len;
        }
        Ok(out)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::mismatch("reshape", self.shape(), shape));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(Tensor::record_shared(self.shared_data(), shape.to_vec(), &[self], Reshape))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no tensors given"))?;
        if axis >= first.ndim() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for shape {:?}", first.shape()),
            ));
        }
        for p in &parts[1..] {
            let compatible = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", first.shape(), p.shape()));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.dim(axis)).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let run = p.dim(axis) * inner;
                data.extend_from_slice(&p.data()[o * run..(o + 1) * run]);
            }
        }
        Ok(Tensor::record(data, shape, parts, Concat { axis }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || len == 0 || start + len > self.dim(axis) {
            return Err(TensorError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        if start == 0 && len == self.dim(axis) {
            return Ok(self.clone());
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = self.dim(axis);
        let mut idx = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            let base = (o * full + start) * inner;
            idx.extend(base..base + len * inner);
        }
        Ok(gather(self, "slice", &Arc::new(idx), &shape))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let &[r, c] = self.shape() else {
            return Err(TensorError::invalid("transpose", format!("expected 2-D, got {:?}", self.shape())));
        };
        let idx: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        Ok(gather(self, "transpose", &Arc::new(idx), &[c, r]))
    }

    /// 2×2 max pooling with stride 2 over `[B, C, H, W]`; odd trailing rows
    /// and columns are dropped.
    pub fn max_pool2d(&self) -> Result<Tensor<T>> {
        let [b, ch, h, w] = expect_4d("max_pool2d", self.shape())?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::invalid("max_pool2d", format!("input {:?} too small", self.shape())));
        }
        let x = self.data();
        let mut idx = Vec::with_capacity(b * ch * oh * ow);
        for plane in 0..b * ch {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * i + di) * w + 2 * j + dj;
                        if x[k] > x[best] {
                            best = k;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        Ok(gather(self, "max_pool2d", &Arc::new(idx), &[b, ch, oh, ow]))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let [b, ch, h, w] = expect_4d("upsample_nearest2x", self.shape())?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut idx = Vec::with_capacity(b * ch * oh * ow);
        for plane in 0..b * ch {
            for i in 0..oh {
                for j in 0..ow {
                    idx.push(plane * h * w + (i / 2) * w + j / 2);
                }
            }
        }
        Ok(gather(self, "upsample_nearest2x", &Arc::new(idx), &[b, ch, oh, ow]))
    }

    /// Channel-to-space rearrangement: `[B, C·r², H, W] → [B, C, H·r, W·r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [b, cr, h, w] = expect_4d("pixel_shuffle", self.shape())?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(TensorError::invalid(
                "pixel_shuffle",
                format!("{cr} channels not divisible by factor² = {}", r * r),
            ));
        }
        let ch = cr / (r * r);
        let out = [b, ch, h * r, w * r];
        let st = strides(self.shape());
        let mut idx = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for c in 0..ch {
                for y in 0..h * r {
                    for x in 0..w * r {
                        let src_c = c * r * r + (y % r) * r + x % r;
                        idx.push(bi * st[0] + src_c * st[1] + (y / r) * st[2] + x / r);
                    }
                }
            }
        }
        Ok(gather(self, "pixel_shuffle", &Arc::new(idx), &out))
    }

    /// Inverse of [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [b, ch, hr, wr] = expect_4d("pixel_unshuffle", self.shape())?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(TensorError::invalid(
                "pixel_unshuffle",
                format!("spatial extents {hr}×{wr} not divisible by {r}"),
            ));
        }
        let (h, w) = (hr / r, wr / r);
        let out = [b, ch * r * r, h, w];
        let st = strides(self.shape());
        let mut idx = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for oc in 0..ch * r * r {
                let (c, sub) = (oc / (r * r), oc % (r * r));
                let (dy, dx) = (sub / r, sub % r);
                for y in 0..h {
                    for x in 0..w {
                        idx.push(bi * st[0] + c * st[1] + (y * r + dy) * st[2] + x * r + dx);
                    }
                }
            }
        }
        Ok(gather(self, "pixel_unshuffle", &Arc::new(idx), &out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn pixel_shuffle_shape() {
        let x = Tensor::<f64>::zeros(&[1, 4, 5, 3]);
        assert_eq!(x.pixel_shuffle(2).unwrap().shape(), &[1, 1, 10, 6]);
    }

    #[test]
    fn pixel_shuffle_places_channels() {
        let x = t(vec![1.0, 2.0, 3.0, 4.0], &[1, 4, 1, 1]);
        assert_eq!(x.pixel_shuffle(2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_rejects_bad_channels() {
        assert!(Tensor::<f64>::zeros(&[1, 3, 2, 2]).pixel_shuffle(2).is_err());
    }

    #[test]
    fn max_pool_and_upsample() {
        let x = t((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        assert_eq!(x.max_pool2d().unwrap().data(), &[5.0, 7.0, 13.0, 15.0]);
        let y = t(vec![1.0, 2.0], &[1, 1, 1, 2]).upsample_nearest2x().unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice() {
        let a = t(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(vec![5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(1, 2, 1).unwrap().data(), &[5.0, 6.0]);
        assert!(Tensor::concat(&[&a, &t(vec![1.0; 3], &[3, 1])], 1).is_err());
    }

    #[test]
    fn transpose_2d() {
        let a = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
