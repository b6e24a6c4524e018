use sganvo::data::synth::{generate_synth, SynthSceneSpec};
use sganvo::data::to_batch;
use sganvo::losses::{discriminator_layer_loss, generator_temporal, Signs};
use sganvo::model::{critic_inputs, Sganvo, StackConfig, WindowBatch};
use sganvo_tensor::{reaches, ParamSet, Rng, Tensor};

/// Two-layer stack with narrow channels so a full unroll stays cheap.
fn small_two_layer() -> StackConfig {
    StackConfig {
        layers: 2,
        window: 3,
        width: 128,
        height: 64,
        a_channels: Some(vec![4, 6]),
        r_channels: Some(vec![2, 3, 4]),
        ..Default::default()
    }
}

fn random_batch(cfg: &StackConfig, seed: u64) -> WindowBatch<f64> {
    let spec = SynthSceneSpec::default().resized(cfg.width, cfg.height);
    let scene = generate_synth(&spec).unwrap();
    let mut batch = to_batch::<f64>(&[sganvo::data::SequenceWindow {
        frames: scene.window.frames[..cfg.window].to_vec(),
        sequence: "synth".into(),
        start: 0,
    }])
    .unwrap();
    // perturb so windows built from different seeds differ
    let mut rng = Rng::new(seed);
    for f in batch.left.iter_mut().chain(batch.right.iter_mut()) {
        let noise = rng.uniform_tensor::<f64>(f.shape(), -0.05, 0.05);
        *f = f.add(&noise).unwrap();
    }
    batch
}

fn params_with_prefix<'a>(p: &'a ParamSet<f64>, prefix: &str) -> Vec<&'a Tensor<f64>> {
    p.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t).collect()
}

#[test]
fn error_units_have_twice_the_target_channels() {
    for cfg in [StackConfig::default(), small_two_layer()] {
        let m = Sganvo::<f64>::new(&cfg, 1).unwrap();
        let steps = m.generator.unroll(&m.g_params, &random_batch(&cfg, 2)).unwrap();
        assert_eq!(steps.len(), cfg.window);
        for s in &steps {
            for l in 0..=cfg.layers {
                assert_eq!(s.e[l].dim(1), 2 * s.a[l].dim(1), "layer {l}");
                assert_eq!(s.a[l].shape(), s.a_hat[l].shape());
                assert_eq!(s.a[l].dim(1), cfg.target_channels(l));
            }
            assert_eq!(s.e[0].dim(1), 6);
            for l in 1..=cfg.layers {
                assert_eq!(s.a[l].dim(2) * 2, s.e[l - 1].dim(2));
                assert_eq!(s.a[l].dim(3) * 2, s.e[l - 1].dim(3));
            }
        }
    }
}

#[test]
fn bottom_state_sees_the_layer_above_from_the_same_step() {
    let cfg = small_two_layer();
    let m = Sganvo::<f64>::new(&cfg, 4).unwrap();
    let mut states = m.generator.init_states::<f64>(1);
    for step in 0..2 {
        m.generator.top_down_pass(&m.g_params, &mut states).unwrap();
        for l in 0..cfg.layers {
            assert!(reaches(&states[l].r.h, &states[l + 1].r.h), "step {step}: R{l} misses the new R{}", l + 1);
        }
        // the top layer never looks down
        assert!(!reaches(&states[cfg.layers].r.h, &states[0].r.h));
    }
}

#[test]
fn loss_reaches_every_recurrent_layer_at_every_step() {
    let cfg = small_two_layer();
    let m = Sganvo::<f64>::new(&cfg, 5).unwrap();
    let steps = m.generator.unroll(&m.g_params, &random_batch(&cfg, 6)).unwrap();
    for l in 0..=cfg.layers {
        let lstm = params_with_prefix(&m.g_params, &format!("layer{l}/lstm/"));
        assert!(!lstm.is_empty());
        for (t, s) in steps.iter().enumerate() {
            assert!(lstm.iter().all(|p| reaches(&s.pose, p)), "pose at step {t} misses layer {l}");
        }
    }
    let errors: Vec<Vec<Tensor<f64>>> = steps.iter().map(|s| s.e.clone()).collect();
    let loss = generator_temporal(&errors, &cfg.lambda_step(), &cfg.lambda_layer()).unwrap();
    let grads = m.g_params.grads(&loss).unwrap();
    for l in 0..=cfg.layers {
        let prefix = format!("layer{l}/lstm/");
        let norm: f64 = grads.iter().filter(|(n, _)| n.starts_with(&prefix)).flat_map(|(_, g)| g.to_vec()).map(|v| v * v).sum();
        assert!(norm > 0.0, "no gradient reaches {prefix}");
    }
}

#[test]
fn generator_and_critic_graphs_are_separate() {
    let cfg = StackConfig::default();
    let m = Sganvo::<f64>::new(&cfg, 7).unwrap();
    let steps = m.generator.unroll(&m.g_params, &random_batch(&cfg, 8)).unwrap();
    let inputs = critic_inputs(&steps, cfg.layers).unwrap();
    let g_params: Vec<&Tensor<f64>> = m.g_params.iter().map(|(_, t)| t).collect();
    let d_params: Vec<&Tensor<f64>> = m.d_params.iter().map(|(_, t)| t).collect();

    let mut rng = Rng::new(1);
    for (l, (real, fake)) in inputs.iter().enumerate() {
        let critic = |x: &Tensor<f64>| m.critics.forward(&m.d_params, l, x);
        let loss = discriminator_layer_loss(critic, &real.detach(), &fake.detach(), &mut rng, 10.0, Signs::Standard).unwrap();
        assert!(d_params.iter().any(|p| reaches(&loss.total, p)));
        assert!(!g_params.iter().any(|p| reaches(&loss.total, p)), "critic loss of layer {l} reaches the generator");
    }
    let errors: Vec<Vec<Tensor<f64>>> = steps.iter().map(|s| s.e.clone()).collect();
    let temporal = generator_temporal(&errors, &cfg.lambda_step(), &cfg.lambda_layer()).unwrap();
    assert!(!d_params.iter().any(|p| reaches(&temporal, p)));
}

#[test]
fn windows_start_from_fresh_states() {
    let cfg = StackConfig::default();
    let m = Sganvo::<f64>::new(&cfg, 9).unwrap();
    let a = random_batch(&cfg, 10);
    let b = random_batch(&cfg, 11);
    let alone = m.generator.unroll(&m.g_params, &b).unwrap();
    m.generator.unroll(&m.g_params, &a).unwrap();
    let after = m.generator.unroll(&m.g_params, &b).unwrap();
    for (x, y) in alone.iter().zip(&after) {
        assert_eq!(x.pose.to_vec(), y.pose.to_vec());
        assert_eq!(x.d_left[0].to_vec(), y.d_left[0].to_vec());
    }
}

#[test]
fn first_step_pairs_a_frame_with_itself() {
    let cfg = StackConfig::default();
    let m = Sganvo::<f64>::new(&cfg, 12).unwrap();
    let steps = m.generator.unroll(&m.g_params, &random_batch(&cfg, 13)).unwrap();
    // zero-initialized pose heads give the identity motion, so the first
    // reconstruction is the frame itself
    assert!(steps[0].pose.to_vec().iter().all(|&v| v == 0.0));
    assert!(steps[0].e[0].to_vec().iter().all(|&v| v.abs() < 1e-12));
}
