use crate::error::{Result, TensorError};
use crate::ops::broadcast::{broadcast_map, broadcast_shape};
use crate::scalar::{c, Scalar};
use crate::tensor::{BackwardCtx, BackwardOp, Tensor};

/// SELU constants (Klambauer et al.).
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

fn mask<T: Scalar>(x: &Tensor<T>, pred: impl Fn(T) -> bool) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if pred(v) { T::one() } else { T::zero() }).collect();
    Tensor::from_vec(data, x.shape()).expect("shape of existing tensor")
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    x.data().iter().map(|&v| f(v)).collect()
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp(Binary);

impl<T: Scalar> BackwardOp<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        let (ga, gb) = match self.0 {
            Binary::Add => (
                ctx.needs(0).then(|| g.clone()),
                ctx.needs(1).then(|| g.clone()),
            ),
            Binary::Sub => (ctx.needs(0).then(|| g.clone()), ctx.needs(1).then(|| g.neg())),
            Binary::Mul => (
                if ctx.needs(0) { Some(g.mul(b)?) } else { None },
                if ctx.needs(1) { Some(g.mul(a)?) } else { None },
            ),
            Binary::Div => (
                if ctx.needs(0) { Some(g.div(b)?) } else { None },
                if ctx.needs(1) {
                    Some(g.mul(ctx.output)?.div(b)?.neg())
                } else {
                    None
                },
            ),
        };
        Ok(vec![
            ga.map(|t| t.sum_to(a.shape())).transpose()?,
            gb.map(|t| t.sum_to(b.shape())).transpose()?,
        ])
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
    let op = BinaryOp(kind);
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::mismatch(BackwardOp::<T>::name(&op), a.shape(), b.shape()))?;
    let data = match kind {
        Binary::Add => broadcast_map(a.data(), a.shape(), b.data(), b.shape(), &out_shape, |x, y| x + y),
        Binary::Sub => broadcast_map(a.data(), a.shape(), b.data(), b.shape(), &out_shape, |x, y| x - y),
        Binary::Mul => broadcast_map(a.data(), a.shape(), b.data(), b.shape(), &out_shape, |x, y| x * y),
        Binary::Div => broadcast_map(a.data(), a.shape(), b.data(), b.shape(), &out_shape, |x, y| x / y),
    };
    Ok(Tensor::record(data, out_shape, &[a, b], op))
}

struct Neg;
impl<T: Scalar> BackwardOp<T> for Neg {
    fn name(&self) -> &'static str {
        "neg"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.neg())])
    }
}

struct AddScalar;
impl<T: Scalar> BackwardOp<T> for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.clone())])
    }
}

struct MulScalar(f64);
impl<T: Scalar> BackwardOp<T> for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.mul_scalar(self.0))])
    }
}

struct Relu;
impl<T: Scalar> BackwardOp<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let m = mask(&ctx.inputs[0], |v| v > T::zero());
        Ok(vec![Some(ctx.grad.mul(&m)?)])
    }
}

struct Selu;
impl<T: Scalar> BackwardOp<T> for Selu {
    fn name(&self) -> &'static str {
        "selu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        // selu'(x) = scale for x > 0, scale * alpha * exp(x) otherwise. The
        // exponential branch stays on the graph so second derivatives exist.
        let x = &ctx.inputs[0];
        let pos = mask(x, |v| v > T::zero()).mul_scalar(SELU_SCALE);
        let neg = mask(x, |v| v <= T::zero());
        let deriv = x.exp().mul(&neg)?.mul_scalar(SELU_SCALE * SELU_ALPHA).add(&pos)?;
        Ok(vec![Some(ctx.grad.mul(&deriv)?)])
    }
}

struct Sigmoid;
impl<T: Scalar> BackwardOp<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let y = ctx.output;
        let d = y.mul(&y.neg().add_scalar(1.0))?;
        Ok(vec![Some(ctx.grad.mul(&d)?)])
    }
}

struct Tanh;
impl<T: Scalar> BackwardOp<T> for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let y = ctx.output;
        let d = y.mul(y)?.neg().add_scalar(1.0);
        Ok(vec![Some(ctx.grad.mul(&d)?)])
    }
}

struct Exp;
impl<T: Scalar> BackwardOp<T> for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.mul(ctx.output)?)])
    }
}

struct Log;
impl<T: Scalar> BackwardOp<T> for Log {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.div(&ctx.inputs[0])?)])
    }
}

struct Abs;
impl<T: Scalar> BackwardOp<T> for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let x = &ctx.inputs[0];
        let data = map(x, |v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        let sign = Tensor::from_vec(data, x.shape())?;
        Ok(vec![Some(ctx.grad.mul(&sign)?)])
    }
}

/// Smallest denominator used by the square-root and norm backward passes.
pub(crate) const TINY: f64 = 1e-300;

struct Sqrt;
impl<T: Scalar> BackwardOp<T> for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let tiny = T::min_positive_value().to_f64_lossy().max(TINY);
        let y = ctx.output.clamp_min(tiny);
        Ok(vec![Some(ctx.grad.div(&y)?.mul_scalar(0.5))])
    }
}

struct Sin;
impl<T: Scalar> BackwardOp<T> for Sin {
    fn name(&self) -> &'static str {
        "sin"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.mul(&ctx.inputs[0].cos())?)])
    }
}

struct Cos;
impl<T: Scalar> BackwardOp<T> for Cos {
    fn name(&self) -> &'static str {
        "cos"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.mul(&ctx.inputs[0].sin())?.neg())])
    }
}

struct Clamp {
    lo: f64,
    hi: f64,
}
impl<T: Scalar> BackwardOp<T> for Clamp {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (lo, hi) = (c::<T>(self.lo), c::<T>(self.hi));
        let m = mask(&ctx.inputs[0], |v| v >= lo && v <= hi);
        Ok(vec![Some(ctx.grad.mul(&m)?)])
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Div)
    }

    pub fn neg(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| -v), self.shape().to_vec(), &[self], Neg)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = c::<T>(s);
        Tensor::record(map(self, |v| v + s), self.shape().to_vec(), &[self], AddScalar)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let k = c::<T>(s);
        Tensor::record(map(self, |v| v * k), self.shape().to_vec(), &[self], MulScalar(s))
    }

    pub fn square(&self) -> Tensor<T> {
        self.mul(self).expect("same shape")
    }

    pub fn relu(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.max(T::zero())), self.shape().to_vec(), &[self], Relu)
    }

    pub fn selu(&self) -> Tensor<T> {
        let (alpha, scale) = (c::<T>(SELU_ALPHA), c::<T>(SELU_SCALE));
        let f = |v: T| {
            if v > T::zero() {
                scale * v
            } else {
                scale * alpha * (v.exp() - T::one())
            }
        };
        Tensor::record(map(self, f), self.shape().to_vec(), &[self], Selu)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let f = |v: T| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        };
        Tensor::record(map(self, f), self.shape().to_vec(), &[self], Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.tanh()), self.shape().to_vec(), &[self], Tanh)
    }

    pub fn exp(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.exp()), self.shape().to_vec(), &[self], Exp)
    }

    pub fn log(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.ln()), self.shape().to_vec(), &[self], Log)
    }

    pub fn abs(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.abs()), self.shape().to_vec(), &[self], Abs)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.sqrt()), self.shape().to_vec(), &[self], Sqrt)
    }

    pub fn sin(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.sin()), self.shape().to_vec(), &[self], Sin)
    }

    pub fn cos(&self) -> Tensor<T> {
        Tensor::record(map(self, |v| v.cos()), self.shape().to_vec(), &[self], Cos)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (l, h) = (c::<T>(lo), c::<T>(hi));
        Tensor::record(
            map(self, |v| v.max(l).min(h)),
            self.shape().to_vec(),
            &[self],
            Clamp { lo, hi },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor<T> {
        self.clamp(lo, f64::INFINITY)
    }
}
