//! Generator and critic objectives.
//!
//! Sign convention: with [`Signs::Standard`] the critic minimizes
//! `E[D(x̂)] − E[D(x)] + λ_D·GP` and the generator minimizes
//! `−Σ_l λ_l E[D(x̂^l)]`, the usual WGAN-GP pairing. [`Signs::PaperLiteral`]
//! flips both adversarial terms for comparison runs.

use serde::{Deserialize, Serialize};
use sganvo_tensor::{grad, Rng, Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signs {
    #[default]
    Standard,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1e-4,
            beta: 1.0,
            gamma: 0.1,
            lambda_d: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad: Vec<String> = [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda_d", self.lambda_d)]
            .iter()
            .filter(|(_, v)| !(*v >= 0.0 && v.is_finite()))
            .map(|(k, v)| format!("loss.{k} = {v} must be finite and non-negative"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Scalar values of one training step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub g_adv: f64,
    pub g_temporal: f64,
    pub g_disparity: f64,
    pub g_final: f64,
    pub d_per_layer: Vec<f64>,
    pub d_final: f64,
}

/// Adversarial generator term from the mean critic score on generated
/// inputs of each layer.
pub fn generator_adversarial<T: Scalar>(critic_means: &[Tensor<T>], lambda_layer: &[f64], signs: Signs) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    for (c, &w) in critic_means.iter().zip(lambda_layer) {
        total = total.add(&c.mul_scalar(w))?;
    }
    Ok(match signs {
        Signs::Standard => total.neg(),
        Signs::PaperLiteral => total,
    })
}

/// `Σ_t λ_t Σ_l (λ_l / n_l)·‖E_t^l‖₁`, where `n_l` is the element count of
/// `E^l`. `errors[t][l]` is the error image of layer l at step t.
pub fn generator_temporal<T: Scalar>(errors: &[Vec<Tensor<T>>], lambda_step: &[f64], lambda_layer: &[f64]) -> Result<Tensor<T>> {
    if errors.len() != lambda_step.len() {
        return Err(Error::config(format!("{} steps of errors but {} step weights", errors.len(), lambda_step.len())));
    }
    let mut total = Tensor::scalar(T::zero());
    for (step, &wt) in errors.iter().zip(lambda_step) {
        for (e, &wl) in step.iter().zip(lambda_layer) {
            total = total.add(&e.l1_norm().mul_scalar(wt * wl / e.numel() as f64))?;
        }
    }
    Ok(total)
}

/// `Σ_t Σ_s mean|d_left − d_right|` over steps and scales. Averaging at the
/// native resolution of each scale equals averaging after nearest-neighbour
/// upsampling.
pub fn disparity_consistency<T: Scalar>(left: &[Vec<Tensor<T>>], right: &[Vec<Tensor<T>>]) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    for (ls, rs) in left.iter().zip(right) {
        for (l, r) in ls.iter().zip(rs) {
            total = total.add(&l.sub(r)?.abs().mean())?;
        }
    }
    Ok(total)
}

/// `α·adv + β·temporal + γ·disparity`; a non-finite part is an error naming
/// the term.
pub fn generator_final<T: Scalar>(adv: &Tensor<T>, temporal: &Tensor<T>, disparity: &Tensor<T>, w: &LossWeights) -> Result<Tensor<T>> {
    for (name, t) in [("adversarial", adv), ("temporal", temporal), ("disparity", disparity)] {
        if !t.all_finite() {
            return Err(Error::Numerical(format!("{name} generator loss is not finite")));
        }
    }
    Ok(adv.mul_scalar(w.alpha).add(&temporal.mul_scalar(w.beta))?.add(&disparity.mul_scalar(w.gamma))?)
}

/// Critic loss of one layer and its parts.
pub struct CriticLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub wasserstein: Tensor<T>,
    pub penalty: Tensor<T>,
}

/// WGAN-GP critic loss. `critic` maps a `[B, ...]` batch to `[B]` scores;
/// `real` and `fake` must already be detached from the generator. One
/// interpolation weight ε ~ U(0, 1) is drawn per sample and the penalty
/// gradient is built with `create_graph` so it backpropagates into the
/// critic parameters.
pub fn discriminator_layer_loss<T, F>(critic: F, real: &Tensor<T>, fake: &Tensor<T>, rng: &mut Rng, lambda_d: f64, signs: Signs) -> Result<CriticLoss<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if real.shape() != fake.shape() {
        return Err(Error::config(format!("critic inputs differ in shape: {:?} vs {:?}", real.shape(), fake.shape())));
    }
    let b = real.dim(0);
    let mut eps_shape = vec![1; real.ndim()];
    eps_shape[0] = b;
    let eps = rng.uniform_tensor::<T>(&eps_shape, 0.0, 1.0);
    let one_minus = eps.neg().add_scalar(1.0);
    let interp = real.mul(&eps)?.add(&fake.mul(&one_minus)?)?.detach().requires_grad_leaf();

    let d_real = critic(real)?.mean();
    let d_fake = critic(fake)?.mean();
    let wasserstein = match signs {
        Signs::Standard => d_fake.sub(&d_real)?,
        Signs::PaperLiteral => d_real.sub(&d_fake)?,
    };
    let d_interp = critic(&interp)?.sum();
    let g = grad(&d_interp, &[&interp], true)?.remove(0);
    let penalty = g.batch_l2_norm().add_scalar(-1.0).square().mean().mul_scalar(lambda_d);
    let total = wasserstein.add(&penalty)?;
    Ok(CriticLoss {
        total,
        wasserstein,
        penalty,
    })
}

/// `Σ_l λ_l·loss_l`.
pub fn discriminator_total<T: Scalar>(per_layer: &[Tensor<T>], lambda_layer: &[f64]) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    for (d, &w) in per_layer.iter().zip(lambda_layer) {
        total = total.add(&d.mul_scalar(w))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(generator_adversarial(&[s(0.0)], &[1.0], Signs::Standard).unwrap().item(), 0.0);
        assert_eq!(generator_adversarial(&[s(2.0)], &[1.0], Signs::Standard).unwrap().item(), -2.0);
        let v = generator_adversarial(&[s(1.0), s(2.0)], &[1.0, 0.1], Signs::Standard).unwrap().item();
        assert!((v.abs() - 1.2).abs() < 1e-15);
        assert_eq!(generator_adversarial(&[s(2.0)], &[1.0], Signs::PaperLiteral).unwrap().item(), 2.0);
    }

    #[test]
    fn temporal_ones() {
        let e = vec![vec![Tensor::<f64>::ones(&[10])]];
        assert_eq!(generator_temporal(&e, &[1.0], &[1.0]).unwrap().item(), 1.0);
    }

    #[test]
    fn final_weights() {
        let w = LossWeights::default();
        let v = generator_final(&s(1.0), &s(1.0), &s(1.0), &w).unwrap().item();
        assert_eq!(v, 1e-4 + 1.0 + 0.1);
        let err = generator_final(&s(f64::NAN), &s(1.0), &s(1.0), &w).unwrap_err().to_string();
        assert!(err.contains("adversarial"));
    }

    #[test]
    fn discriminator_total_weights() {
        let v = discriminator_total(&[s(10.0), s(10.0), s(10.0)], &[1.0, 0.1, 0.1]).unwrap().item();
        assert!((v - 12.0).abs() < 1e-12);
    }

    #[test]
    fn zero_critic_penalty() {
        let mut rng = Rng::new(1);
        let x = rng.uniform_tensor::<f64>(&[3, 4], 0.0, 1.0);
        let y = rng.uniform_tensor::<f64>(&[3, 4], 0.0, 1.0);
        let w = Tensor::<f64>::zeros(&[4, 1]).requires_grad_leaf();
        let critic = |x: &Tensor<f64>| Ok(x.matmul(&w)?.reshape(&[x.dim(0)])?);
        let l = discriminator_layer_loss(critic, &x, &y, &mut rng, 10.0, Signs::Standard).unwrap();
        assert_eq!(l.penalty.item(), 10.0);
        assert_eq!(l.wasserstein.item(), 0.0);
    }
}
