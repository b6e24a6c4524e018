//! Alternating critic/generator training over unrolled windows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sganvo_tensor::{clip_global_norm, no_grad, Adam, AdamConfig, Checkpoint, ParamSet, Rng, RngState, Scalar, Tensor, TensorError};

use crate::data::{to_batch, Augment, SequenceWindow, WindowSource};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_layer_loss, discriminator_total, disparity_consistency, generator_adversarial, generator_final, generator_temporal, LossReport,
    LossWeights, Signs,
};
use crate::model::{critic_inputs, Critics, Generator, Sganvo, StackConfig, WindowBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per batch; capped by the number of windows available.
    pub batch_size: usize,
    /// Total iterations; when absent, `epochs` passes over the windows.
    pub iterations: Option<usize>,
    pub base_lr: f64,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub seed: u64,
    /// Checkpoint period in iterations (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip (0 disables).
    pub clip_norm: f64,
    /// Consecutive skipped steps tolerated before training aborts.
    pub max_skips: usize,
    /// Record elapsed milliseconds in the log; off keeps logs bit-identical
    /// across runs.
    pub log_wall_time: bool,
    pub signs: Signs,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            iterations: None,
            base_lr: 1e-4,
            n_critic: 5,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 100.0,
            max_skips: 10,
            log_wall_time: false,
            signs: Signs::Standard,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".to_string());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            errs.push(format!("train.base_lr = {} must be positive", self.base_lr));
        }
        if !(self.clip_norm >= 0.0) {
            errs.push(format!("train.clip_norm = {} must be non-negative", self.clip_norm));
        }
        if self.iterations == Some(0) {
            errs.push("train.iterations must be positive when set".to_string());
        }
        if !(0.0..=1.0).contains(&self.augment.lr_swap) || !(0.0..1.0).contains(&self.augment.color_jitter) {
            errs.push("train.augment: lr_swap must be in [0, 1] and color_jitter in [0, 1)".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn total_iterations(&self, windows: usize) -> usize {
        self.iterations.unwrap_or(self.epochs * iterations_per_epoch(windows, self.batch_size))
    }
}

/// `base · 0.5^floor(5·iter/total)`: five plateaus, each half the previous.
pub fn lr_schedule(iter: usize, total: usize, base: f64) -> f64 {
    let k = if total == 0 { 0 } else { (5 * iter / total).min(4) };
    base * 0.5f64.powi(k as i32)
}

pub fn iterations_per_epoch(windows: usize, batch_size: usize) -> usize {
    let b = batch_size.min(windows).max(1);
    windows.div_ceil(b)
}

/// Window indices of iteration `iter`: each epoch visits a permutation
/// seeded by `(seed, epoch)`; the last batch of an epoch wraps around.
pub fn batch_indices(iter: usize, windows: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let b = batch_size.min(windows).max(1);
    let per_epoch = iterations_per_epoch(windows, batch_size);
    let (epoch, pos) = (iter / per_epoch, iter % per_epoch);
    let mut order: Vec<usize> = (0..windows).collect();
    Rng::with_stream(seed, 1000 + epoch as u64).shuffle(&mut order);
    (pos * b..pos * b + b).map(|i| order[i % windows]).collect()
}

/// Mutable training state; everything needed to continue a run exactly.
#[derive(Clone)]
pub struct TrainState<T: Scalar> {
    pub iteration: usize,
    pub g: ParamSet<T>,
    pub d: ParamSet<T>,
    pub adam_g: Adam<T>,
    pub adam_d: Adam<T>,
    pub rng: Rng,
    pub best_loss: f64,
    pub consecutive_skips: usize,
}

pub struct Trainer<T: Scalar> {
    pub generator: Generator,
    pub critics: Critics,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub state: TrainState<T>,
    /// Extra entries written into every checkpoint.
    pub metadata: BTreeMap<String, String>,
}

/// Outcome of one iteration.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub report: LossReport,
    pub lr: f64,
    /// Set when the step was skipped; parameters are then unchanged.
    pub skipped: Option<String>,
}

fn scalar<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.item().to_f64_lossy()
}

fn numerical(e: Error) -> std::result::Result<String, Error> {
    match e {
        Error::Numerical(m) => Ok(m),
        Error::Tensor(TensorError::NonFiniteGradient(p)) => Ok(format!("non-finite gradient for `{p}`")),
        Error::Tensor(TensorError::NonFinite { op }) => Ok(format!("non-finite value produced by {op}")),
        other => Err(other),
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(stack: &StackConfig, cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let model = Sganvo::<T>::new(stack, cfg.seed)?;
        Ok(Trainer {
            generator: model.generator,
            critics: model.critics,
            state: TrainState {
                iteration: 0,
                g: model.g_params,
                d: model.d_params,
                adam_g: Adam::new(AdamConfig::default()),
                adam_d: Adam::new(AdamConfig::default()),
                rng: Rng::with_stream(cfg.seed, 3),
                best_loss: f64::INFINITY,
                consecutive_skips: 0,
            },
            cfg,
            weights,
            metadata: BTreeMap::new(),
        })
    }

    fn stack(&self) -> &StackConfig {
        &self.generator.cfg
    }

    fn adversarial(&self) -> bool {
        self.cfg.n_critic > 0 || self.weights.alpha > 0.0
    }

    /// One critic update on detached samples. Returns the critic loss value.
    fn critic_step(&mut self, inputs: &[(Tensor<T>, Tensor<T>)], lr: f64) -> Result<(f64, Vec<f64>)> {
        let lambda = self.stack().lambda_layer();
        let mut per_layer = Vec::new();
        for (l, (real, fake)) in inputs.iter().enumerate() {
            let critic = |x: &Tensor<T>| self.critics.forward(&self.state.d, l, x);
            let loss = discriminator_layer_loss(critic, real, fake, &mut self.state.rng, self.weights.lambda_d, self.cfg.signs)?;
            per_layer.push(loss.total);
        }
        let total = discriminator_total(&per_layer, &lambda)?;
        if !total.all_finite() {
            return Err(Error::Numerical("critic loss is not finite".into()));
        }
        let mut grads = self.state.d.grads(&total)?;
        if self.cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.cfg.clip_norm);
        }
        self.state.adam_d.step(&mut self.state.d, &grads, lr)?;
        Ok((scalar(&total), per_layer.iter().map(scalar).collect()))
    }

    /// Critic means on generated inputs of every layer, `[]`-shaped.
    fn critic_means(&self, fakes: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        fakes
            .iter()
            .enumerate()
            .map(|(l, x)| Ok(self.critics.forward(&self.state.d, l, x)?.mean()))
            .collect()
    }

    fn try_step(&mut self, batch: &WindowBatch<T>, lr: f64) -> Result<LossReport> {
        let stack = self.stack().clone();
        let steps = self.generator.unroll(&self.state.g, batch)?;
        let mut report = LossReport::default();

        let attached = if self.adversarial() { critic_inputs(&steps, stack.layers)? } else { Vec::new() };
        let detached: Vec<(Tensor<T>, Tensor<T>)> = attached.iter().map(|(r, f)| (r.detach(), f.detach())).collect();
        for _ in 0..self.cfg.n_critic {
            let (total, per_layer) = self.critic_step(&detached, lr)?;
            report.d_final = total;
            report.d_per_layer = per_layer;
        }

        let lambda_layer = stack.lambda_layer();
        let adv = if self.weights.alpha > 0.0 {
            let fakes: Vec<Tensor<T>> = attached.iter().map(|(_, f)| f.clone()).collect();
            generator_adversarial(&self.critic_means(&fakes)?, &lambda_layer, self.cfg.signs)?
        } else if self.adversarial() {
            no_grad(|| -> Result<Tensor<T>> {
                let fakes: Vec<Tensor<T>> = detached.iter().map(|(_, f)| f.clone()).collect();
                generator_adversarial(&self.critic_means(&fakes)?, &lambda_layer, self.cfg.signs)
            })?
        } else {
            Tensor::scalar(T::zero())
        };
        let errors: Vec<Vec<Tensor<T>>> = steps.iter().map(|s| s.e.clone()).collect();
        let temporal = generator_temporal(&errors, &stack.lambda_step(), &lambda_layer)?;
        let left: Vec<Vec<Tensor<T>>> = steps.iter().map(|s| s.d_left.clone()).collect();
        let right: Vec<Vec<Tensor<T>>> = steps.iter().map(|s| s.d_right.clone()).collect();
        let disparity = disparity_consistency(&left, &right)?;
        let total = generator_final(&adv, &temporal, &disparity, &self.weights)?;

        let mut grads = self.state.g.grads(&total)?;
        if self.cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.cfg.clip_norm);
        }
        self.state.adam_g.step(&mut self.state.g, &grads, lr)?;

        report.g_adv = scalar(&adv);
        report.g_temporal = scalar(&temporal);
        report.g_disparity = scalar(&disparity);
        report.g_final = scalar(&total);
        Ok(report)
    }

    /// `n_critic` critic updates followed by one generator update on
    /// `batch`, with the learning rate scheduled over `total` iterations. A
    /// non-finite loss or gradient restores the parameters and reports the
    /// step as skipped.
    pub fn train_step(&mut self, batch: &WindowBatch<T>, total: usize) -> Result<StepResult> {
        let lr = lr_schedule(self.state.iteration, total, self.cfg.base_lr);
        let snapshot = self.state.clone();
        let result = match self.try_step(batch, lr) {
            Ok(report) => {
                self.state.consecutive_skips = 0;
                if report.g_final < self.state.best_loss {
                    self.state.best_loss = report.g_final;
                }
                StepResult { report, lr, skipped: None }
            }
            Err(e) => {
                let reason = numerical(e)?;
                let rng = self.state.rng.clone();
                self.state = snapshot;
                // keep the random stream moving so a retry sees new samples
                self.state.rng = rng;
                self.state.consecutive_skips += 1;
                log::warn!("iteration {}: step skipped: {reason}", self.state.iteration);
                StepResult {
                    report: LossReport::default(),
                    lr,
                    skipped: Some(reason),
                }
            }
        };
        self.state.iteration += 1;
        if self.state.consecutive_skips > self.cfg.max_skips {
            return Err(Error::Numerical(format!(
                "{} consecutive steps skipped; last: {}",
                self.state.consecutive_skips,
                result.skipped.as_deref().unwrap_or("")
            )));
        }
        Ok(result)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let mut ck = Checkpoint::new();
        ck.metadata.extend(self.metadata.clone());
        ck.add_params("g/", &s.g);
        ck.add_params("d/", &s.d);
        for (tag, adam) in [("adam_g", &s.adam_g), ("adam_d", &s.adam_d)] {
            for (name, m) in &adam.moments {
                ck.add_array(format!("{tag}/m/{name}"), &[m.m.len()], &m.m);
                ck.add_array(format!("{tag}/v/{name}"), &[m.v.len()], &m.v);
            }
            ck.metadata.insert(format!("{tag}_step"), adam.step.to_string());
        }
        ck.metadata.insert("iteration".into(), s.iteration.to_string());
        ck.metadata.insert("rng".into(), s.rng.state().to_hex());
        ck.metadata.insert("best_loss".into(), format!("{:016x}", s.best_loss.to_bits()));
        ck.metadata.insert("consecutive_skips".into(), s.consecutive_skips.to_string());
        ck.metadata.insert("dtype".into(), T::DTYPE.to_string());
        ck
    }

    /// Restores the state saved by [`Trainer::to_checkpoint`] into a trainer
    /// built from the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let meta = |k: &str| ck.metadata.get(k).ok_or_else(|| Error::data(format!("checkpoint is missing `{k}`")));
        let parse = |k: &str| -> Result<u64> { meta(k)?.parse().map_err(|_| Error::data(format!("checkpoint `{k}` is not an integer"))) };
        if meta("dtype")? != &T::DTYPE.to_string() {
            return Err(Error::data(format!("checkpoint precision {} does not match {}", meta("dtype")?, T::DTYPE)));
        }
        let g = ck.params::<T>("g/")?;
        let d = ck.params::<T>("d/")?;
        for (name, want, got) in [("generator", &self.state.g, &g), ("critic", &self.state.d, &d)] {
            for (n, t) in want.iter() {
                let have = got.get(n).map_err(|_| Error::data(format!("checkpoint lacks {name} parameter `{n}`")))?;
                if have.shape() != t.shape() {
                    return Err(Error::data(format!(
                        "checkpoint parameter `{n}` has shape {:?}, configuration expects {:?}",
                        have.shape(),
                        t.shape()
                    )));
                }
            }
            if got.len() != want.len() {
                return Err(Error::data(format!("checkpoint holds {} {name} parameters, configuration has {}", got.len(), want.len())));
            }
        }
        let mut adams = Vec::new();
        for tag in ["adam_g", "adam_d"] {
            let mut adam = Adam::new(AdamConfig::default());
            adam.step = parse(&format!("{tag}_step"))?;
            let prefix = format!("{tag}/m/");
            for a in ck.arrays.iter().filter(|a| a.name.starts_with(&prefix)) {
                let name = &a.name[prefix.len()..];
                let v = ck
                    .array(&format!("{tag}/v/{name}"))
                    .ok_or_else(|| Error::data(format!("checkpoint lacks second moment of `{name}`")))?;
                adam.moments.insert(
                    name.to_string(),
                    sganvo_tensor::optim::Moments {
                        m: a.data.to_vec(),
                        v: v.data.to_vec(),
                    },
                );
            }
            adams.push(adam);
        }
        let rng = RngState::from_hex(meta("rng")?).ok_or_else(|| Error::data("checkpoint rng state is malformed"))?;
        let best = u64::from_str_radix(meta("best_loss")?, 16).map_err(|_| Error::data("checkpoint best_loss is malformed"))?;
        let adam_d = adams.pop().expect("two optimizers");
        let adam_g = adams.pop().expect("two optimizers");
        self.state = TrainState {
            iteration: parse("iteration")? as usize,
            g,
            d,
            adam_g,
            adam_d,
            rng: Rng::from_state(&rng),
            best_loss: f64::from_bits(best),
            consecutive_skips: parse("consecutive_skips")? as usize,
        };
        Ok(())
    }
}

pub const LOG_HEADER: &str = "iter,lr,g_adv,g_temporal,g_disparity,g_final,d_final,wall_ms";

fn log_line(iter: usize, r: &StepResult, wall_ms: u128) -> String {
    let rep = &r.report;
    format!(
        "{iter},{:e},{:e},{:e},{:e},{:e},{:e},{wall_ms}",
        r.lr, rep.g_adv, rep.g_temporal, rep.g_disparity, rep.g_final, rep.d_final
    )
}

/// Where a run writes its log and checkpoints.
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ckpt")
    }

    pub fn periodic_checkpoint(&self, iter: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_{iter:08}.ckpt"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iterations: usize,
    pub skipped: usize,
    pub first: Option<LossReport>,
    pub last: Option<LossReport>,
    /// `(iteration, report)` of every completed step.
    pub history: Vec<(usize, LossReport)>,
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path).map_err(|e| Error::io(path, e))
}

/// Runs (or continues) training until the configured iteration count,
/// appending to the CSV log. Windows that fail to load are skipped with a
/// warning.
pub fn train<T: Scalar>(trainer: &mut Trainer<T>, source: &dyn WindowSource, out: &RunOutput) -> Result<TrainSummary> {
    train_observed(trainer, source, out, |_, _| true)
}

/// [`train`], calling `observe(iteration, report)` after every completed
/// step; returning `false` ends the run early (the learning-rate schedule
/// still follows the configured total).
pub fn train_observed<T: Scalar>(
    trainer: &mut Trainer<T>,
    source: &dyn WindowSource,
    out: &RunOutput,
    mut observe: impl FnMut(usize, &LossReport) -> bool,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let n = source.len();
    if n == 0 {
        return Err(Error::data("dataset yields no windows"));
    }
    let total = trainer.cfg.total_iterations(n);
    let log_path = out.log_path();
    let resuming = trainer.state.iteration > 0;
    let fresh = !resuming || std::fs::metadata(&log_path).map_or(true, |m| m.len() == 0);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    if total == 0 {
        save(&trainer.to_checkpoint(), &out.final_checkpoint())?;
        return Ok(TrainSummary {
            iterations: 0,
            skipped: 0,
            first: None,
            last: None,
            history: Vec::new(),
        });
    }
    let start = Instant::now();
    let mut summary = TrainSummary {
        iterations: 0,
        skipped: 0,
        first: None,
        last: None,
        history: Vec::new(),
    };
    let mut aug_rng = Rng::with_stream(trainer.cfg.seed, 4);
    while trainer.state.iteration < total {
        let iter = trainer.state.iteration;
        let mut windows: Vec<SequenceWindow> = Vec::new();
        for i in batch_indices(iter, n, trainer.cfg.batch_size, trainer.cfg.seed) {
            match source.window(i) {
                Ok(w) => windows.push(w),
                Err(e) => log::warn!("iteration {iter}: skipping window {i}: {e}"),
            }
        }
        if windows.is_empty() {
            trainer.state.iteration += 1;
            summary.skipped += 1;
            continue;
        }
        if !trainer.cfg.augment.is_off() {
            windows = windows.iter().map(|w| trainer.cfg.augment.apply(w, &mut aug_rng)).collect();
        }
        let batch = to_batch::<T>(&windows)?;
        let result = trainer.train_step(&batch, total)?;
        let wall = if trainer.cfg.log_wall_time { start.elapsed().as_millis() } else { 0 };
        writeln!(log, "{}", log_line(iter, &result, wall)).map_err(|e| Error::io(&log_path, e))?;
        summary.iterations += 1;
        let mut stop = false;
        if result.skipped.is_some() {
            summary.skipped += 1;
        } else {
            stop = !observe(iter, &result.report);
            summary.first.get_or_insert_with(|| result.report.clone());
            summary.last = Some(result.report.clone());
            summary.history.push((iter, result.report));
        }
        if iter % 50 == 0 {
            log::info!("iteration {iter}/{total}: g_final {:.5e}, d_final {:.5e}", summary.last.as_ref().map_or(f64::NAN, |r| r.g_final), summary.last.as_ref().map_or(f64::NAN, |r| r.d_final));
        }
        if stop {
            break;
        }
        let done = trainer.state.iteration;
        if trainer.cfg.checkpoint_every > 0 && done % trainer.cfg.checkpoint_every == 0 && done < total {
            save(&trainer.to_checkpoint(), &out.periodic_checkpoint(done))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save(&trainer.to_checkpoint(), &out.final_checkpoint())?;
    Ok(summary)
}
