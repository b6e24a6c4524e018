use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. Gradients are validated before any parameter is
    /// touched: a non-finite gradient aborts the whole step and names its
    /// parameter.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2, lr_t, eps_t) = (c::<T>(beta1), c::<T>(beta2), c::<T>(lr), c::<T>(eps));
        let (bc1, bc2) = (c::<T>(bc1), c::<T>(bc2));
        let one = T::one();
        for (name, g) in grads {
            let p = params.get(name)?;
            let n = p.numel();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let mut values = p.to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                mom.m[i] = b1 * mom.m[i] + (one - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (one - b2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                values[i] = values[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
            params.set_values(name, values)?;
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if total.is_finite() && total > max_norm {
        let k = max_norm / total;
        for (_, g) in grads.iter_mut() {
            *g = g.mul_scalar(k).detach();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;

    fn scalar_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("x", &Tensor::from_vec(vec![v], &[1]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params() {
        let mut p = scalar_param(1.5);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &[("x".into(), Tensor::zeros(&[1]))], 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
        assert_eq!(adam.moments["x"].m, vec![0.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = scalar_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &[("x".into(), Tensor::ones(&[1]))], 0.1).unwrap();
        let (m0, v0) = (adam.moments["x"].m[0], adam.moments["x"].v[0]);
        adam.step(&mut p, &[("x".into(), Tensor::zeros(&[1]))], 0.1).unwrap();
        assert!((adam.moments["x"].m[0] - 0.9 * m0).abs() < 1e-15);
        assert!((adam.moments["x"].v[0] - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &[("x".into(), Tensor::ones(&[1]))], 0.1).unwrap();
        // m̂ = 1, v̂ = 1 at t = 1
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = scalar_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut steps = 0;
        for _ in 0..500 {
            let x = p.get("x").unwrap().clone();
            let loss = x.add_scalar(-3.0).square().sum();
            let g = grad(&loss, &[&x], false).unwrap().remove(0);
            adam.step(&mut p, &[("x".into(), g)], 0.1).unwrap();
            steps += 1;
            if (p.get("x").unwrap().data()[0] - 3.0).abs() < 1e-3 {
                break;
            }
        }
        assert!((p.get("x").unwrap().data()[0] - 3.0).abs() < 1e-3, "not converged in {steps} steps");
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut p = scalar_param(2.0);
        p.insert("y", &Tensor::ones(&[2]));
        let mut adam = Adam::new(AdamConfig::default());
        let grads = vec![
            ("x".to_string(), Tensor::ones(&[1])),
            ("y".to_string(), Tensor::from_vec(vec![1.0, f64::NAN], &[2]).unwrap()),
        ];
        let err = adam.step(&mut p, &grads, 0.1).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("y".into()));
        assert_eq!(p.get("x").unwrap().data(), &[2.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut grads = vec![
            ("a".to_string(), Tensor::<f64>::from_vec(vec![3.0], &[1]).unwrap()),
            ("b".to_string(), Tensor::<f64>::from_vec(vec![4.0], &[1]).unwrap()),
        ];
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads[0].1.data()[0] - 0.6).abs() < 1e-15);
        assert!((grads[1].1.data()[0] - 0.8).abs() < 1e-15);
    }
}
