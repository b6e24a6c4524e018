use std::path::Path;

use sganvo::data::synth::{generate_synth, SynthSceneSpec};
use sganvo::data::{sliding_windows, to_batch, SequenceWindow};
use sganvo::losses::LossWeights;
use sganvo::model::StackConfig;
use sganvo::trainer::{train, train_observed, RunOutput, TrainConfig, Trainer, LOG_HEADER};
use sganvo_tensor::Checkpoint;

fn windows() -> Vec<SequenceWindow> {
    let scene = generate_synth(&SynthSceneSpec::default()).unwrap();
    sliding_windows(&scene.window.frames, 3, "synth")
}

fn config(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: Some(iterations),
        batch_size: 2,
        n_critic: 2,
        seed,
        ..Default::default()
    }
}

fn trainer(cfg: TrainConfig) -> Trainer<f64> {
    Trainer::new(&StackConfig::default(), cfg, LossWeights::default()).unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn identical_runs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = windows();
    let mut logs = Vec::new();
    let mut params = Vec::new();
    for run in ["a", "b"] {
        let out = RunOutput { dir: dir.path().join(run) };
        let mut t = trainer(config(3, 17));
        train(&mut t, &data, &out).unwrap();
        logs.push(read(&out.log_path()));
        params.push((t.state.g, t.state.d));
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0].lines().count(), 4);
    assert!(params[0].0.bit_equal(&params[1].0) && params[0].1.bit_equal(&params[1].1));
}

#[test]
fn resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = windows();
    let whole = RunOutput { dir: dir.path().join("whole") };
    let mut full = trainer(config(4, 5));
    train(&mut full, &data, &whole).unwrap();

    let split = RunOutput { dir: dir.path().join("split") };
    let mut first = trainer(config(4, 5));
    train_observed(&mut first, &data, &split, |i, _| i + 1 < 2).unwrap();
    assert_eq!(first.state.iteration, 2);
    let ck = Checkpoint::load(&split.final_checkpoint()).unwrap();
    drop(first);
    let mut second = trainer(config(4, 5));
    second.restore(&ck).unwrap();
    train(&mut second, &data, &split).unwrap();

    assert_eq!(read(&whole.log_path()), read(&split.log_path()));
    assert!(full.state.g.bit_equal(&second.state.g));
    assert!(full.state.d.bit_equal(&second.state.d));
    assert_eq!(
        Checkpoint::load(&whole.final_checkpoint()).unwrap(),
        Checkpoint::load(&split.final_checkpoint()).unwrap()
    );
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput { dir: dir.path().to_path_buf() };
    let mut t = trainer(TrainConfig {
        epochs: 0,
        checkpoint_every: 1,
        ..Default::default()
    });
    let initial = t.to_checkpoint();
    let summary = train(&mut t, &windows(), &out).unwrap();
    assert_eq!(summary.iterations, 0);
    let mut names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["checkpoint.ckpt", "train_log.csv"]);
    assert_eq!(read(&out.log_path()).trim(), LOG_HEADER);
    assert_eq!(Checkpoint::load(&out.final_checkpoint()).unwrap(), initial);
}

#[test]
fn periodic_checkpoints_follow_the_interval() {
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput { dir: dir.path().to_path_buf() };
    let mut t = trainer(TrainConfig {
        checkpoint_every: 2,
        n_critic: 1,
        ..config(5, 1)
    });
    train(&mut t, &windows(), &out).unwrap();
    for i in [2, 4] {
        assert!(out.periodic_checkpoint(i).exists(), "missing checkpoint {i}");
    }
    assert!(!out.periodic_checkpoint(5).exists());
    assert!(out.final_checkpoint().exists());
}

#[test]
fn without_critic_steps_or_adversarial_weight_the_critic_is_untouched() {
    let data = windows();
    let mut t = Trainer::<f64>::new(
        &StackConfig::default(),
        TrainConfig { n_critic: 0, ..config(2, 3) },
        LossWeights {
            alpha: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    let d0 = t.state.d.clone();
    let g0 = t.state.g.clone();
    let batch = to_batch::<f64>(&data[..1]).unwrap();
    for _ in 0..2 {
        let r = t.train_step(&batch, 2).unwrap();
        assert!(r.skipped.is_none());
        assert_eq!((r.report.g_adv, r.report.d_final), (0.0, 0.0));
    }
    assert!(t.state.d.bit_equal(&d0));
    assert!(!t.state.g.bit_equal(&g0));
    assert!(t.state.adam_d.moments.is_empty());
}

#[test]
fn non_finite_step_is_skipped_without_touching_parameters() {
    let mut t = trainer(config(4, 2));
    let mut batch = to_batch::<f64>(&windows()[..1]).unwrap();
    let shape = batch.left[1].shape().to_vec();
    batch.left[1] = sganvo_tensor::Tensor::full(&shape, f64::NAN);
    let before = t.state.clone();
    let r = t.train_step(&batch, 4).unwrap();
    assert!(r.skipped.is_some());
    assert!(t.state.g.bit_equal(&before.g) && t.state.d.bit_equal(&before.d));
    assert_eq!(t.state.iteration, 1);
    assert_eq!(t.state.consecutive_skips, 1);
}

#[test]
fn repeated_failures_abort() {
    let mut t = trainer(TrainConfig {
        max_skips: 1,
        n_critic: 0,
        ..config(4, 2)
    });
    let mut batch = to_batch::<f64>(&windows()[..1]).unwrap();
    let shape = batch.left[0].shape().to_vec();
    batch.left[0] = sganvo_tensor::Tensor::full(&shape, f64::NAN);
    assert!(t.train_step(&batch, 4).is_ok());
    let err = t.train_step(&batch, 4).unwrap_err();
    assert!(matches!(err, sganvo::Error::Numerical(_)), "{err}");
}

#[test]
fn two_hundred_steps_halve_the_temporal_loss_on_one_window() {
    let data = windows();
    let mut t = trainer(TrainConfig {
        batch_size: 1,
        n_critic: 1,
        ..config(200, 4)
    });
    let batch = to_batch::<f64>(&data[..1]).unwrap();
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(t.train_step(&batch, 200).unwrap().report.g_temporal);
    }
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * losses[0], "{} -> {tail}", losses[0]);
}
