use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardCtx, BackwardOp, Tensor};

struct Matmul;
impl<T: Scalar> BackwardOp<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        let ga = if ctx.needs(0) { Some(g.matmul(&b.transpose()?)?) } else { None };
        let gb = if ctx.needs(1) { Some(a.transpose()?.matmul(g)?) } else { None };
        Ok(vec![ga, gb])
    }
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(TensorError::mismatch("matmul", self.shape(), other.shape()));
        };
        if k != k2 {
            return Err(TensorError::mismatch("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(),
            k as isize,
            1,
            other.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(Tensor::record(out, vec![m, n], &[self, other], Matmul))
    }
}
