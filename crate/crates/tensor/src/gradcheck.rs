//! Central finite-difference oracle for gradients computed by [`grad`].
//!
//! The numerical side only evaluates the function; it never touches the
//! backward pass.

use crate::autograd::grad;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Compares the analytic gradient of the scalar `f` at `inputs` against
/// central differences with step `h`. `floor` bounds the denominator of the
/// relative error from below so that vanishing gradient entries are judged
/// on an absolute scale.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64, floor: f64) -> Result<FdReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requires_grad_leaf()).collect();
    let out = f(&leaves)?;
    let refs: Vec<&Tensor<f64>> = leaves.iter().collect();
    let analytic = grad(&out, &refs, false)?;

    let base: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
    let eval = |which: usize, k: usize, delta: f64| -> Result<f64> {
        let mut args = base.clone();
        let mut data = args[which].to_vec();
        data[k] += delta;
        args[which] = Tensor::from_vec(data, args[which].shape())?;
        Ok(f(&args)?.item())
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        elements: 0,
    };
    for (i, a) in analytic.iter().enumerate() {
        for k in 0..a.numel() {
            let numeric = (eval(i, k, h)? - eval(i, k, -h)?) / (2.0 * h);
            let an = a.data()[k];
            let abs = (an - numeric).abs();
            let rel = abs / an.abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { report.max_rel_err.max(rel) };
            report.elements += 1;
        }
    }
    Ok(report)
}

/// A named finite-difference check with its pass threshold.
#[derive(Clone, Copy)]
pub struct GradCheck {
    pub name: &'static str,
    pub module: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> Result<FdReport>,
}

impl std::fmt::Debug for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCheck")
            .field("name", &self.name)
            .field("module", &self.module)
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

/// Step used by the primitive checks.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error threshold of the primitive checks.
pub const FD_TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

use crate::ops::conv::Padding;
use crate::rng::Rng;

/// Uniform values with magnitude in `[0.1, 1]` and random sign, keeping
/// samples away from the kinks of relu/abs/clamp.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.1, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_vec(data, shape).expect("positive extents")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, 0.5, 2.0)
}

/// `sum(op(x) ⊙ r)` for a fixed random `r`, so every output entry gets a
/// distinct weight.
fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = Rng::with_stream(seed, 99);
    let r = rng.uniform_tensor::<f64>(y.shape(), -1.0, 1.0);
    Ok(y.mul(&r)?.sum())
}

macro_rules! unary_check {
    ($name:literal, $gen:ident, $shape:expr, |$x:ident| $body:expr) => {
        GradCheck {
            name: $name,
            module: "tensor",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let input = $gen(&mut rng, &$shape);
                check_gradients(|a: &[Tensor<f64>]| {
                    let $x = &a[0];
                    project(&$body, seed)
                }, &[input], FD_STEP, FLOOR)
            },
        }
    };
}

macro_rules! binary_check {
    ($name:literal, $gen:ident, $sa:expr, $sb:expr, |$a:ident, $b:ident| $body:expr) => {
        GradCheck {
            name: $name,
            module: "tensor",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let x = away_from_zero(&mut rng, &$sa);
                let y = $gen(&mut rng, &$sb);
                check_gradients(|t: &[Tensor<f64>]| {
                    let ($a, $b) = (&t[0], &t[1]);
                    project(&$body, seed)
                }, &[x, y], FD_STEP, FLOOR)
            },
        }
    };
}

/// Gradient checks for every differentiable primitive, including the
/// second-order paths used by gradient penalties.
pub fn primitive_checks() -> Vec<GradCheck> {
    vec![
        binary_check!("add", away_from_zero, [3, 4], [3, 4], |a, b| a.add(b)?),
        binary_check!("add_broadcast", away_from_zero, [3, 4], [1, 4], |a, b| a.add(b)?),
        binary_check!("sub", away_from_zero, [3, 4], [3, 1], |a, b| a.sub(b)?),
        binary_check!("mul", away_from_zero, [3, 4], [3, 4], |a, b| a.mul(b)?),
        binary_check!("div", positive, [3, 4], [3, 4], |a, b| a.div(b)?),
        binary_check!("matmul", away_from_zero, [3, 4], [4, 2], |a, b| a.matmul(b)?),
        unary_check!("neg", away_from_zero, [3, 4], |x| x.neg()),
        unary_check!("add_scalar", away_from_zero, [3, 4], |x| x.add_scalar(0.7)),
        unary_check!("mul_scalar", away_from_zero, [3, 4], |x| x.mul_scalar(-1.3)),
        unary_check!("relu", away_from_zero, [3, 4], |x| x.relu()),
        unary_check!("selu", away_from_zero, [3, 4], |x| x.selu()),
        unary_check!("sigmoid", away_from_zero, [3, 4], |x| x.sigmoid()),
        unary_check!("tanh", away_from_zero, [3, 4], |x| x.tanh()),
        unary_check!("exp", away_from_zero, [3, 4], |x| x.exp()),
        unary_check!("log", positive, [3, 4], |x| x.log()),
        unary_check!("abs", away_from_zero, [3, 4], |x| x.abs()),
        unary_check!("sqrt", positive, [3, 4], |x| x.sqrt()),
        unary_check!("sin", away_from_zero, [3, 4], |x| x.sin()),
        unary_check!("cos", away_from_zero, [3, 4], |x| x.cos()),
        unary_check!("clamp", away_from_zero, [3, 4], |x| x.clamp(-0.55, 0.45)),
        unary_check!("sum", away_from_zero, [3, 4], |x| x.sum()),
        unary_check!("mean", away_from_zero, [3, 4], |x| x.mean()),
        unary_check!("sum_to", away_from_zero, [3, 4], |x| x.sum_to(&[3, 1])?),
        unary_check!("broadcast_to", away_from_zero, [3, 1], |x| x.broadcast_to(&[2, 3, 4])?),
        unary_check!("l1_norm", away_from_zero, [3, 4], |x| x.l1_norm()),
        unary_check!("l2_norm", away_from_zero, [3, 4], |x| x.l2_norm()),
        unary_check!("batch_l2_norm", away_from_zero, [3, 4], |x| x.batch_l2_norm()),
        unary_check!("reshape", away_from_zero, [3, 4], |x| x.reshape(&[2, 6])?),
        unary_check!("slice", away_from_zero, [3, 4], |x| x.slice(1, 1, 2)?),
        unary_check!("transpose", away_from_zero, [3, 4], |x| x.transpose()?),
        binary_check!("concat", away_from_zero, [3, 4], [3, 2], |a, b| Tensor::concat(&[a, b], 1)?),
        unary_check!("max_pool2d", away_from_zero, [1, 2, 4, 6], |x| x.max_pool2d()?),
        unary_check!("upsample_nearest2x", away_from_zero, [1, 2, 3, 4], |x| x.upsample_nearest2x()?),
        unary_check!("pixel_shuffle", away_from_zero, [1, 8, 3, 4], |x| x.pixel_shuffle(2)?),
        unary_check!("pixel_unshuffle", away_from_zero, [1, 2, 4, 6], |x| x.pixel_unshuffle(2)?),
        binary_check!("conv2d", away_from_zero, [2, 3, 7, 6], [4, 3, 5, 5], |x, w| x.conv2d(w, 2, Padding::Same)?),
        binary_check!("conv2d_valid", away_from_zero, [1, 2, 6, 5], [3, 2, 4, 4], |x, w| x.conv2d(w, 1, Padding::Valid)?),
        binary_check!("conv_transpose2d", away_from_zero, [1, 3, 3, 4], [3, 2, 3, 3], |x, w| x.conv_transpose2d(w, 2)?),
        GradCheck {
            name: "bilinear_sample",
            module: "tensor",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let src = away_from_zero(&mut rng, &[1, 2, 5, 6]);
                // keep fractional parts away from the tap boundaries
                let coords: Vec<f64> = (0..3 * 4)
                    .flat_map(|_| {
                        let x = rng.below(7) as f64 - 1.0 + rng.uniform_range(0.2, 0.8);
                        let y = rng.below(6) as f64 - 1.0 + rng.uniform_range(0.2, 0.8);
                        [x, y]
                    })
                    .collect();
                let coords = Tensor::from_vec(coords, &[1, 3, 4, 2])?;
                check_gradients(|a: &[Tensor<f64>]| project(&a[0].bilinear_sample(&a[1])?, seed), &[src, coords], FD_STEP, FLOOR)
            },
        },
        GradCheck {
            name: "double_backward_pow4",
            module: "tensor",
            tolerance: 1e-6,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let x = away_from_zero(&mut rng, &[3, 4]);
                check_gradients(|a: &[Tensor<f64>]| {
                    let x = tracked(&a[0]);
                    let x2 = x.square();
                    let f = x2.square().sum();
                    let g = grad(&f, &[&x], true)?.remove(0);
                    project(&g, seed)
                }, &[x], FD_STEP, FLOOR)
            },
        },
        GradCheck {
            name: "double_backward_conv_selu",
            module: "tensor",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let x = away_from_zero(&mut rng, &[2, 2, 6, 6]);
                let w = away_from_zero(&mut rng, &[3, 2, 3, 3]).mul_scalar(0.5);
                let w2 = away_from_zero(&mut rng, &[1, 3, 3, 3]).mul_scalar(0.5);
                check_gradients(|a: &[Tensor<f64>]| {
                    let x = tracked(&a[0]);
                    let h = x.conv2d(&a[1], 2, Padding::Same)?.selu();
                    let d = h.conv2d(&a[2], 1, Padding::Valid)?.sum();
                    let g = grad(&d, &[&x], true)?.remove(0);
                    Ok(g.batch_l2_norm().add_scalar(-1.0).square().sum())
                }, &[x, w, w2], FD_STEP, FLOOR)
            },
        },
        GradCheck {
            name: "double_backward_bilinear_src",
            module: "tensor",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let src = away_from_zero(&mut rng, &[1, 1, 4, 4]);
                let coords: Vec<f64> = (0..2 * 3)
                    .flat_map(|_| [rng.below(3) as f64 + rng.uniform_range(0.2, 0.8), rng.below(3) as f64 + rng.uniform_range(0.2, 0.8)])
                    .collect();
                let coords = Tensor::from_vec(coords, &[1, 2, 3, 2])?;
                let weight = away_from_zero(&mut rng, &[1, 1, 2, 3]);
                check_gradients(|a: &[Tensor<f64>]| {
                    let src = tracked(&a[0]);
                    let f = src.bilinear_sample(&a[1])?.mul(&a[2])?.sum();
                    let g = grad(&f, &[&src], true)?.remove(0);
                    project(&g.square(), seed)
                }, &[src, coords, weight], FD_STEP, FLOOR)
            },
        },
    ]
}

/// `t` itself when it already tracks gradients, else a tracking leaf over
/// its values (used when the numerical side evaluates a function that takes
/// an inner gradient).
pub fn tracked(t: &Tensor<f64>) -> Tensor<f64> {
    if t.requires_grad() {
        t.clone()
    } else {
        t.requires_grad_leaf()
    }
}
