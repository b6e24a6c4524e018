use proptest::prelude::*;
use sganvo::losses::{
    discriminator_layer_loss, discriminator_total, disparity_consistency, generator_adversarial, generator_final, generator_temporal, LossWeights, Signs,
};
use sganvo_tensor::{Rng, Tensor};

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

fn s(v: f64) -> Tensor<f64> {
    Tensor::scalar(v)
}

/// Straight loops over the raw values, written without the tensor ops.
fn temporal_oracle(errors: &[Vec<Vec<f64>>], lambda_step: &[f64], lambda_layer: &[f64]) -> f64 {
    let mut total = 0.0;
    for (step, wt) in errors.iter().zip(lambda_step) {
        for (e, wl) in step.iter().zip(lambda_layer) {
            let l1: f64 = e.iter().map(|v| v.abs()).sum();
            total += wt * wl / e.len() as f64 * l1;
        }
    }
    total
}

fn linear_critic(w: Tensor<f64>) -> impl Fn(&Tensor<f64>) -> sganvo::Result<Tensor<f64>> {
    move |x: &Tensor<f64>| Ok(x.matmul(&w)?.reshape(&[x.dim(0)])?)
}

#[test]
fn temporal_matches_hand_sums() {
    // two steps, two layers, 2 to 10 elements per error image
    let raw = vec![
        vec![vec![0.5, -0.25, 1.0, 0.0], vec![1.0; 10]],
        vec![vec![-2.0, 0.5, 0.25, 0.25], vec![0.5, -0.5]],
    ];
    let errors: Vec<Vec<Tensor<f64>>> = raw.iter().map(|step| step.iter().map(|e| t(e, &[e.len()])).collect()).collect();
    let (ls, ll) = ([0.5, 0.5], [1.0, 0.25]);
    let got = generator_temporal(&errors, &ls, &ll).unwrap().item();
    // (0.5·1·1.75/4 + 0.5·0.25·10/10) + (0.5·3/4 + 0.5·0.25·1/2)
    assert_eq!(got, 0.21875 + 0.125 + 0.375 + 0.0625);
    assert_eq!(got, temporal_oracle(&raw, &ls, &ll));
}

#[test]
fn temporal_ten_ones_is_one() {
    let got = generator_temporal(&[vec![Tensor::<f64>::ones(&[10])]], &[1.0], &[1.0]).unwrap().item();
    assert_eq!(got, 1.0);
}

#[test]
fn disparity_matches_hand_means() {
    let l0 = t(&[1.0, 1.0, 1.0, 1.0], &[1, 1, 2, 2]);
    let r0 = t(&[0.5, 0.5, 1.5, 1.5], &[1, 1, 2, 2]);
    let l1 = t(&[0.25, 0.75], &[1, 1, 1, 2]);
    let r1 = t(&[0.25, 0.25], &[1, 1, 1, 2]);
    let one = disparity_consistency(&[vec![l0.clone()]], &[vec![r0.clone()]]).unwrap().item();
    assert_eq!(one, 0.5);
    let two = disparity_consistency(&[vec![l0, l1.clone()]], &[vec![r0, r1.clone()]]).unwrap().item();
    assert_eq!(two, 0.5 + 0.25);
    let identical = disparity_consistency(&[vec![l1.clone()]], &[vec![l1]]).unwrap().item();
    assert_eq!(identical, 0.0);
}

#[test]
fn final_loss_with_default_weights() {
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.beta, w.gamma), (1e-4, 1.0, 0.1));
    let got = generator_final(&s(1.0), &s(1.0), &s(1.0), &w).unwrap().item();
    assert_eq!(got, 1.1001);
    let zero = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..w
    };
    assert_eq!(generator_final(&s(3.0), &s(5.0), &s(7.0), &zero).unwrap().item(), 0.0);
    assert_eq!(generator_final(&s(0.0), &s(0.375), &s(0.0), &w).unwrap().item(), 0.375);
}

#[test]
fn non_finite_part_is_named() {
    let err = generator_final(&s(0.0), &s(f64::NAN), &s(0.0), &LossWeights::default()).unwrap_err().to_string();
    assert!(err.contains("temporal"), "{err}");
}

#[test]
fn adversarial_weighted_sum() {
    let g = generator_adversarial(&[s(1.0), s(2.0)], &[1.0, 0.1], Signs::Standard).unwrap().item();
    assert!((g + 1.2).abs() < 1e-15);
    let lit = generator_adversarial(&[s(2.0)], &[1.0], Signs::PaperLiteral).unwrap().item();
    assert_eq!(lit, 2.0);
}

#[test]
fn unit_norm_linear_critic_has_zero_penalty() {
    let mut rng = Rng::new(11);
    for w in [[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]] {
        let critic = linear_critic(t(&w, &[2, 1]));
        let real = rng.uniform_tensor::<f64>(&[5, 2], -3.0, 3.0);
        let fake = rng.uniform_tensor::<f64>(&[5, 2], -3.0, 3.0);
        let loss = discriminator_layer_loss(critic, &real, &fake, &mut rng, 10.0, Signs::Standard).unwrap();
        assert_eq!(loss.penalty.item(), 0.0, "w = {w:?}");
    }
}

#[test]
fn zero_critic_penalty_is_lambda() {
    let mut rng = Rng::new(3);
    let real = rng.uniform_tensor::<f64>(&[4, 3], 0.0, 1.0);
    let fake = rng.uniform_tensor::<f64>(&[4, 3], 0.0, 1.0);
    let loss = discriminator_layer_loss(linear_critic(Tensor::zeros(&[3, 1])), &real, &fake, &mut rng, 10.0, Signs::Standard).unwrap();
    assert_eq!(loss.penalty.item(), 10.0);
    assert_eq!(loss.wasserstein.item(), 0.0);
    assert_eq!(loss.total.item(), 10.0);
}

#[test]
fn equal_inputs_leave_only_the_penalty() {
    let mut rng = Rng::new(5);
    let x = rng.uniform_tensor::<f64>(&[3, 2], -1.0, 1.0);
    let loss = discriminator_layer_loss(linear_critic(t(&[2.0, 1.0], &[2, 1])), &x, &x, &mut rng, 10.0, Signs::Standard).unwrap();
    assert_eq!(loss.wasserstein.item(), 0.0);
    assert_eq!(loss.total.item(), loss.penalty.item());
    // ‖(2, 1)‖ = √5 everywhere
    assert!((loss.penalty.item() - 10.0 * (5f64.sqrt() - 1.0).powi(2)).abs() < 1e-12);
}

#[test]
fn critic_signs() {
    let mut rng = Rng::new(2);
    let real = t(&[1.0, 0.0, 3.0, 0.0], &[2, 2]);
    let fake = t(&[0.0, 0.0, 1.0, 0.0], &[2, 2]);
    let w = t(&[1.0, 0.0], &[2, 1]);
    let std = discriminator_layer_loss(linear_critic(w.clone()), &real, &fake, &mut rng, 10.0, Signs::Standard).unwrap();
    let lit = discriminator_layer_loss(linear_critic(w), &real, &fake, &mut rng, 10.0, Signs::PaperLiteral).unwrap();
    // E[D(real)] = 2, E[D(fake)] = 0.5
    assert_eq!(std.wasserstein.item(), -1.5);
    assert_eq!(lit.wasserstein.item(), 1.5);
}

#[test]
fn discriminator_total_examples() {
    assert_eq!(discriminator_total(&[s(4.5)], &[1.0]).unwrap().item(), 4.5);
    let v = discriminator_total(&[s(10.0), s(10.0), s(10.0)], &[1.0, 0.1, 0.1]).unwrap().item();
    assert!((v - 12.0).abs() < 1e-12);
    assert_eq!(discriminator_total(&[s(2.0), s(7.0)], &[1.0, 0.0]).unwrap().item(), 2.0);
}

#[test]
fn zero_weighted_layer_gets_no_critic_gradient() {
    let mut rng = Rng::new(9);
    let w0 = t(&[0.3, -0.2], &[2, 1]).requires_grad_leaf();
    let w1 = t(&[0.5, 0.1], &[2, 1]).requires_grad_leaf();
    let real = rng.uniform_tensor::<f64>(&[3, 2], -1.0, 1.0);
    let fake = rng.uniform_tensor::<f64>(&[3, 2], -1.0, 1.0);
    let l0 = discriminator_layer_loss(linear_critic(w0.clone()), &real, &fake, &mut rng, 10.0, Signs::Standard).unwrap();
    let l1 = discriminator_layer_loss(linear_critic(w1.clone()), &real, &fake, &mut rng, 10.0, Signs::Standard).unwrap();
    let total = discriminator_total(&[l0.total, l1.total], &[1.0, 0.0]).unwrap();
    let g = sganvo_tensor::grad(&total, &[&w0, &w1], false).unwrap();
    assert!(g[0].to_vec().iter().any(|&v| v != 0.0));
    assert!(g[1].to_vec().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_is_non_negative(w in prop::collection::vec(-3.0f64..3.0, 3), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let real = rng.uniform_tensor::<f64>(&[4, 3], -1.0, 1.0);
        let fake = rng.uniform_tensor::<f64>(&[4, 3], -1.0, 1.0);
        let loss = discriminator_layer_loss(linear_critic(t(&w, &[3, 1])), &real, &fake, &mut rng, 10.0, Signs::Standard).unwrap();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(loss.penalty.item() >= 0.0);
        prop_assert!((loss.penalty.item() - 10.0 * (norm - 1.0).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn temporal_and_disparity_are_non_negative(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        let ta = t(&a, &[1, 1, 2, 3]);
        let tb = t(&b, &[1, 1, 2, 3]);
        let temporal = generator_temporal(&[vec![ta.clone()]], &[1.0], &[1.0]).unwrap().item();
        prop_assert!(temporal >= 0.0);
        prop_assert_eq!(temporal == 0.0, a.iter().all(|&v| v == 0.0));
        let disp = disparity_consistency(&[vec![ta]], &[vec![tb]]).unwrap().item();
        prop_assert!(disp >= 0.0);
        prop_assert_eq!(disp == 0.0, a == b);
    }

    #[test]
    fn final_loss_is_linear_in_each_part(parts in prop::array::uniform3(-10.0f64..10.0), k in -4.0f64..4.0) {
        let w = LossWeights::default();
        let f = |p: [f64; 3]| generator_final(&s(p[0]), &s(p[1]), &s(p[2]), &w).unwrap().item();
        let base = f(parts);
        for (i, coef) in [w.alpha, w.beta, w.gamma].into_iter().enumerate() {
            let mut moved = parts;
            moved[i] += k;
            prop_assert!((f(moved) - base - coef * k).abs() < 1e-9);
        }
    }
}
