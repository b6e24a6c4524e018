use crate::error::{Result, TensorError};
use crate::ops::broadcast::{broadcast_shape, expand, reduce_to};
use crate::ops::elementwise::TINY;
use crate::scalar::Scalar;
use crate::tensor::{numel_of, BackwardCtx, BackwardOp, Tensor};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

struct SumTo;
impl<T: Scalar> BackwardOp<T> for SumTo {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.broadcast_to(ctx.inputs[0].shape())?)])
    }
}

struct BroadcastTo;
impl<T: Scalar> BackwardOp<T> for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.sum_to(ctx.inputs[0].shape())?)])
    }
}

struct BatchL2Norm;
impl<T: Scalar> BackwardOp<T> for BatchL2Norm {
    fn name(&self) -> &'static str {
        "l2_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        // d|x|/dx = x / |x|, taken as 0 at x = 0.
        let x = &ctx.inputs[0];
        let tiny = T::min_positive_value().to_f64_lossy().max(TINY);
        let mut bshape = vec![1; x.ndim()];
        bshape[0] = x.dim(0);
        let scale = ctx.grad.div(&ctx.output.clamp_min(tiny))?.reshape(&bshape)?;
        Ok(vec![Some(x.mul(&scale)?)])
    }
}

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements as a zero-dimensional tensor.
    pub fn sum(&self) -> Tensor<T> {
        self.sum_to(&[]).expect("every shape reduces to a scalar")
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sums over the axes along which `shape` would be broadcast to this
    /// tensor's shape.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        if broadcast_shape(shape, self.shape()).as_deref() != Some(self.shape()) {
            return Err(TensorError::mismatch("sum_to", self.shape(), shape));
        }
        let data = reduce_to(self.data(), self.shape(), shape);
        Ok(Tensor::record(data, shape.to_vec(), &[self], SumTo))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        if broadcast_shape(self.shape(), shape).as_deref() != Some(shape) {
            return Err(TensorError::mismatch("broadcast_to", self.shape(), shape));
        }
        let data = expand(self.data(), self.shape(), shape);
        Ok(Tensor::record(data, shape.to_vec(), &[self], BroadcastTo))
    }

    pub fn l1_norm(&self) -> Tensor<T> {
        self.abs().sum()
    }

    /// Euclidean norm of all elements, as a zero-dimensional tensor.
    pub fn l2_norm(&self) -> Tensor<T> {
        let flat = self.reshape(&[1, self.numel().max(1)]).expect("same element count");
        flat.batch_l2_norm().reshape(&[]).expect("one element")
    }

    /// Euclidean norm of each slice along the first axis; output shape `[B]`.
    pub fn batch_l2_norm(&self) -> Tensor<T> {
        assert!(self.ndim() >= 1, "batch_l2_norm needs a leading axis");
        let b = self.dim(0);
        let per = numel_of(&self.shape()[1..]);
        let data = self
            .data()
            .chunks(per.max(1))
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect::<Vec<T>>();
        debug_assert_eq!(data.len(), b);
        Tensor::record(data, vec![b], &[self], BatchL2Norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_mean() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(x.sum().item(), 10.0);
        assert_eq!(x.mean().item(), 2.5);
        assert_eq!(x.sum().shape(), &[] as &[usize]);
        assert_eq!(x.sum_to(&[1, 2]).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn norms() {
        let x = Tensor::<f64>::from_vec(vec![3.0, -4.0, 0.0, 0.0], &[2, 2]).unwrap();
        assert_eq!(x.l2_norm().item(), 5.0);
        assert_eq!(x.l1_norm().item(), 7.0);
        assert_eq!(x.batch_l2_norm().data(), &[5.0, 0.0]);
    }
}
