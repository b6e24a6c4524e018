use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sganvo::checks::all_checks;
use sganvo::data::kitti::{load_kitti_odometry, load_kitti_raw, raw_eval_frame, read_poses, read_split, LazyWindows};
use sganvo::data::synth::{generate_synth, save_scene};
use sganvo::data::{sliding_windows, DepthMap, Frame, SequenceWindow, WindowSource};
use sganvo::evalkit::{trajectory_from_poses, write_poses, write_trajectory_csv, MetricReport};
use sganvo::geometry::Transform;
use sganvo::inference::{evaluate, evaluate_depth, evaluate_trajectory, normalize_trajectory, predict_sequence, predict_window, EvalOptions, Prediction};
use sganvo::losses::{LossWeights, Signs};
use sganvo::model::StackConfig;
use sganvo::trainer::{self, RunOutput, TrainConfig, Trainer};
use sganvo::{Error, Result};
use sganvo_tensor::{set_fault_injection, Checkpoint, Scalar};

use crate::config::{DataSource, Precision, RunConfig};
use crate::{CommonArgs, EvalDepthArgs, EvalOdomArgs, GradcheckArgs, TrainArgs, EXIT_GRADCHECK, EXIT_OK};

const DEFAULT_OUT: &str = "runs/sganvo";
/// Smallest image the two-layer grid cells accept.
const GRID_MIN_SIZE: (usize, usize) = (128, 64);
const GRID_CELLS: [(usize, usize); 3] = [(1, 2), (1, 3), (2, 3)];

/// The configuration as written by the user (with command-line overrides)
/// and its resolved, validated form.
struct Loaded {
    raw: RunConfig,
    cfg: RunConfig,
    out: PathBuf,
}

fn load(common: &CommonArgs) -> Result<Loaded> {
    let mut raw = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        raw.train.seed = seed;
    }
    if let Some(out) = &common.out {
        raw.out = Some(out.clone());
    }
    if common.paper_literal_signs {
        raw.train.signs = Signs::PaperLiteral;
    }
    let cfg = raw.resolved()?;
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("config.resolved.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(Loaded { raw, cfg, out })
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.root.as_deref().ok_or_else(|| Error::config("data.root is not set"))
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn synth_frames(cfg: &RunConfig, stack: &StackConfig) -> Result<Vec<Frame>> {
    Ok(generate_synth(&cfg.synth.resized(stack.width, stack.height))?.window.frames)
}

fn training_source(cfg: &RunConfig, stack: &StackConfig) -> Result<Box<dyn WindowSource>> {
    let n = stack.window;
    Ok(match cfg.data.source {
        DataSource::Synth => Box::new(sliding_windows(&synth_frames(cfg, stack)?, n, "synth")),
        DataSource::KittiRaw => Box::new(load_kitti_raw(data_root(cfg)?, &cfg.data.drives, n, stack.width, stack.height)?),
        DataSource::KittiOdom => Box::new(load_kitti_odometry(data_root(cfg)?, &cfg.data.sequences, n, stack.width, stack.height)?),
    })
}

fn eval_sequences(cfg: &RunConfig) -> &[String] {
    if cfg.data.eval_sequences.is_empty() {
        &cfg.data.sequences
    } else {
        &cfg.data.eval_sequences
    }
}

fn odometry_eval_set(cfg: &RunConfig, stack: &StackConfig) -> Result<LazyWindows> {
    load_kitti_odometry(data_root(cfg)?, eval_sequences(cfg), stack.window, stack.width, stack.height)
}

/// A trained generator restored from a checkpoint.
struct Model<T: Scalar> {
    trainer: Trainer<T>,
}

impl<T: Scalar> Model<T> {
    fn from_checkpoint(stack: &StackConfig, ck: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(stack, TrainConfig::default(), LossWeights::default())?;
        trainer.restore(ck)?;
        Ok(Model { trainer })
    }

    fn sequence(&self, frames: &[Frame], name: &str) -> Result<Prediction> {
        predict_sequence(&self.trainer.generator, &self.trainer.state.g, frames, name)
    }

    /// Depth of a single frame, fed as a window of identical copies.
    fn still_depth(&self, frame: &Frame) -> Result<DepthMap> {
        let cfg = &self.trainer.generator.cfg;
        let window = SequenceWindow {
            frames: vec![frame.clone(); cfg.window],
            sequence: "still".into(),
            start: frame.index,
        };
        let (depth, _) = predict_window(&self.trainer.generator, &self.trainer.state.g, &window)?;
        Ok(DepthMap {
            width: cfg.width,
            height: cfg.height,
            data: depth.into_iter().last().expect("window is not empty"),
        })
    }
}

/// Laser ground truth and model-resolution frames of a raw split.
fn raw_split(cfg: &RunConfig, split: &Path, width: usize, height: usize) -> Result<(Vec<Frame>, Vec<DepthMap>)> {
    let root = data_root(cfg)?;
    let mut frames = Vec::new();
    let mut gts = Vec::new();
    for (drive, index) in read_split(split)? {
        let (left, gt, calib) = raw_eval_frame(root, &drive, index, width, height, cfg.eval.cap)?;
        frames.push(Frame {
            left,
            right: None,
            calib: calib.calib.resized(width, height),
            index,
            gt_pose: None,
            gt_depth: None,
        });
        gts.push(gt);
    }
    Ok((frames, gts))
}

fn depth_report(label: &str, preds: &[DepthMap], gts: &[DepthMap], opts: &EvalOptions) -> Result<MetricReport> {
    let mut report = MetricReport::new(label);
    report.depth = evaluate_depth(preds, gts, opts)?;
    if report.depth.is_none() {
        return Err(Error::data(format!("{label}: no frames with depth ground truth")));
    }
    if opts.median_scale {
        report.notes.push("depth median-scaled per image".into());
    }
    Ok(report)
}

fn prediction_maps(pred: &Prediction) -> Vec<DepthMap> {
    pred.depth
        .iter()
        .map(|d| DepthMap {
            width: pred.width,
            height: pred.height,
            data: d.clone(),
        })
        .collect()
}

/// Reports of a model on the evaluation data of `cfg`.
fn evaluate_model<T: Scalar>(model: &Model<T>, cfg: &RunConfig, label: &str) -> Result<Vec<MetricReport>> {
    let stack = &model.trainer.generator.cfg;
    let opts = cfg.eval.options();
    match cfg.data.source {
        DataSource::Synth => {
            let frames = synth_frames(cfg, stack)?;
            Ok(vec![evaluate(label, &frames, &model.sequence(&frames, "synth")?, &opts)?])
        }
        DataSource::KittiRaw => {
            let Some(split) = &cfg.data.split else {
                log::warn!("no data.split configured; skipping depth evaluation");
                return Ok(Vec::new());
            };
            let (frames, gts) = raw_split(cfg, split, stack.width, stack.height)?;
            let preds = frames.iter().map(|f| model.still_depth(f)).collect::<Result<Vec<_>>>()?;
            Ok(vec![depth_report(label, &preds, &gts, &opts)?])
        }
        DataSource::KittiOdom => {
            let set = odometry_eval_set(cfg, stack)?;
            let mut reports = Vec::new();
            for (s, name) in eval_sequences(cfg).iter().enumerate() {
                let frames = set.sequence_frames(s)?;
                reports.push(evaluate(&format!("{label} {name}"), &frames, &model.sequence(&frames, name)?, &opts)?);
            }
            Ok(reports)
        }
    }
}

fn write_reports(reports: &[MetricReport], dir: &Path, out: &mut dyn Write) -> Result<()> {
    MetricReport::write_csv(reports, &dir.join("metrics.csv"))?;
    for r in reports {
        say(out, &r.table())?;
    }
    Ok(())
}

fn train_one<T: Scalar>(cfg: &RunConfig, stack: &StackConfig, dir: &Path, resume: Option<&Path>, label: &str, out: &mut dyn Write) -> Result<Vec<MetricReport>> {
    let source = training_source(cfg, stack)?;
    let mut trainer = Trainer::<T>::new(stack, cfg.train.clone(), cfg.loss.clone())?;
    trainer.metadata.insert("stack".into(), toml::to_string(stack).map_err(|e| Error::config(e.to_string()))?);
    if let Some(path) = resume {
        trainer.restore(&Checkpoint::load(path)?)?;
        log::info!("resumed from {} at iteration {}", path.display(), trainer.state.iteration);
    }
    let summary = trainer::train(&mut trainer, source.as_ref(), &RunOutput { dir: dir.to_path_buf() })?;
    say(
        out,
        &format!("{label}: {} iterations, {} skipped, checkpoint {}\n", summary.iterations, summary.skipped, dir.join("checkpoint.ckpt").display()),
    )?;
    let reports = evaluate_model(&Model { trainer }, cfg, label)?;
    if !reports.is_empty() {
        MetricReport::write_csv(&reports, &dir.join("metrics.csv"))?;
    }
    Ok(reports)
}

fn train_dispatch(cfg: &RunConfig, stack: &StackConfig, dir: &Path, resume: Option<&Path>, label: &str, out: &mut dyn Write) -> Result<Vec<MetricReport>> {
    match cfg.precision {
        Precision::F32 => train_one::<f32>(cfg, stack, dir, resume, label, out),
        Precision::F64 => train_one::<f64>(cfg, stack, dir, resume, label, out),
    }
}

/// Stack of one ablation cell, derived from the configuration as written.
pub fn grid_stack(raw: &StackConfig, layers: usize, window: usize) -> Result<StackConfig> {
    let mut s = raw.clone();
    s.layers = layers;
    s.window = window;
    s.width = s.width.max(GRID_MIN_SIZE.0);
    s.height = s.height.max(GRID_MIN_SIZE.1);
    let s = s.resolved();
    s.validate()?;
    Ok(s)
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { raw, cfg, out: dir } = load(&args.common)?;
    if args.grid {
        if args.resume.is_some() {
            return Err(Error::config("--resume cannot be combined with --grid"));
        }
        let mut reports = Vec::new();
        for (l, n) in GRID_CELLS {
            let stack = grid_stack(&raw.stack, l, n)?;
            let cell = dir.join("grid").join(format!("L{l}_N{n}"));
            let label = format!("L={l} N={n}");
            let mut r = train_dispatch(&cfg, &stack, &cell, None, &label, out)?;
            if r.is_empty() {
                r.push(MetricReport::new(label));
            }
            reports.extend(r);
        }
        return write_reports(&reports, &dir, out);
    }
    let reports = train_dispatch(&cfg, &cfg.stack, &dir, args.resume.as_deref(), "sganvo", out)?;
    for r in &reports {
        say(out, &r.table())?;
    }
    Ok(())
}

fn load_model_checkpoint(path: &Path) -> Result<(Checkpoint, StackConfig)> {
    let ck = Checkpoint::load(path)?;
    let text = ck
        .metadata
        .get("stack")
        .ok_or_else(|| Error::data(format!("{}: checkpoint carries no stack configuration", path.display())))?;
    let stack: StackConfig = toml::from_str(text).map_err(|e| Error::data(format!("{}: bad stack metadata: {e}", path.display())))?;
    Ok((ck, stack))
}

fn with_model<R>(path: &Path, f: impl FnOnce(&dyn ModelOps) -> Result<R>) -> Result<R> {
    let (ck, stack) = load_model_checkpoint(path)?;
    match ck.metadata.get("dtype").map(String::as_str) {
        Some("f32") => f(&Model::<f32>::from_checkpoint(&stack, &ck)?),
        Some("f64") => f(&Model::<f64>::from_checkpoint(&stack, &ck)?),
        other => Err(Error::data(format!("{}: unsupported checkpoint precision {other:?}", path.display()))),
    }
}

/// Precision-erased view of a [`Model`].
trait ModelOps {
    fn stack(&self) -> &StackConfig;
    fn sequence(&self, frames: &[Frame], name: &str) -> Result<Prediction>;
    fn still_depth(&self, frame: &Frame) -> Result<DepthMap>;
}

impl<T: Scalar> ModelOps for Model<T> {
    fn stack(&self) -> &StackConfig {
        &self.trainer.generator.cfg
    }

    fn sequence(&self, frames: &[Frame], name: &str) -> Result<Prediction> {
        Model::sequence(self, frames, name)
    }

    fn still_depth(&self, frame: &Frame) -> Result<DepthMap> {
        Model::still_depth(self, frame)
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn read_depth_dir(dir: &Path) -> Result<Vec<DepthMap>> {
    sorted_files(dir, "png")?.iter().map(|p| DepthMap::load_png(p)).collect()
}

fn no_depth_gt() -> Error {
    Error::data("odometry sequences carry no depth ground truth; use the synth or kitti-raw source")
}

pub fn eval_depth(args: &EvalDepthArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { cfg, out: dir, .. } = load(&args.common)?;
    let opts = cfg.eval.options();
    let report = match (&args.checkpoint, &args.depth_dir) {
        (Some(path), _) => with_model(path, |m| match cfg.data.source {
            DataSource::Synth => {
                let frames = synth_frames(&cfg, m.stack())?;
                let pred = m.sequence(&frames, "synth")?;
                let gts: Vec<DepthMap> = frames.iter().filter_map(|f| f.gt_depth.clone()).collect();
                depth_report("synth", &prediction_maps(&pred), &gts, &opts)
            }
            DataSource::KittiRaw => {
                let split = cfg.data.split.as_deref().ok_or_else(|| Error::config("eval-depth on kitti-raw needs data.split"))?;
                let (frames, gts) = raw_split(&cfg, split, m.stack().width, m.stack().height)?;
                let preds = frames.iter().map(|f| m.still_depth(f)).collect::<Result<Vec<_>>>()?;
                depth_report("kitti-raw", &preds, &gts, &opts)
            }
            DataSource::KittiOdom => Err(no_depth_gt()),
        })?,
        (None, Some(depth_dir)) => {
            let preds = read_depth_dir(depth_dir)?;
            let gts = match cfg.data.source {
                DataSource::Synth => generate_synth(&cfg.synth)?.window.frames.into_iter().filter_map(|f| f.gt_depth).collect(),
                DataSource::KittiRaw => {
                    let split = cfg.data.split.as_deref().ok_or_else(|| Error::config("eval-depth on kitti-raw needs data.split"))?;
                    let root = data_root(&cfg)?;
                    read_split(split)?
                        .iter()
                        .map(|(drive, index)| Ok(raw_eval_frame(root, drive, *index, 1, 1, cfg.eval.cap)?.1))
                        .collect::<Result<Vec<_>>>()?
                }
                DataSource::KittiOdom => return Err(no_depth_gt()),
            };
            if preds.len() != gts.len() {
                return Err(Error::data(format!(
                    "{}: {} depth maps for {} ground-truth frames",
                    depth_dir.display(),
                    preds.len(),
                    gts.len()
                )));
            }
            depth_report(&depth_dir.display().to_string(), &preds, &gts, &opts)?
        }
        (None, None) => return Err(Error::config("eval-depth needs --checkpoint or --depth-dir")),
    };
    write_reports(&[report], &dir, out)
}

/// One scored trajectory and its ground truth, both starting at the
/// identity.
struct Scored {
    name: String,
    pred: Vec<Transform>,
    gt: Vec<Transform>,
}

fn score(items: &[Scored], opts: &EvalOptions, dir: &Path) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for s in items {
        if s.pred.len() != s.gt.len() {
            return Err(Error::data(format!("{}: {} predicted poses for {} ground-truth poses", s.name, s.pred.len(), s.gt.len())));
        }
        let mut report = MetricReport::new(&s.name);
        evaluate_trajectory(&s.pred, &s.gt, opts, &mut report)?;
        write_trajectory_csv(&s.pred, &dir.join(format!("trajectory_{}.csv", s.name)))?;
        write_trajectory_csv(&s.gt, &dir.join(format!("trajectory_{}_gt.csv", s.name)))?;
        write_poses(&s.pred, &dir.join(format!("poses_{}.txt", s.name)))?;
        reports.push(report);
    }
    Ok(reports)
}

/// Named ground-truth trajectories and their frames (loaded lazily only
/// when a model needs them).
fn odometry_ground_truth(cfg: &RunConfig, stack: Option<&StackConfig>) -> Result<Vec<(String, Vec<Transform>, Option<Vec<Frame>>)>> {
    match cfg.data.source {
        DataSource::Synth => {
            let frames = match stack {
                Some(s) => synth_frames(cfg, s)?,
                None => generate_synth(&cfg.synth)?.window.frames,
            };
            let gt = sganvo::inference::gt_trajectory(&frames).ok_or_else(|| Error::data("synthetic scene without poses"))?;
            Ok(vec![("synth".into(), gt, Some(frames))])
        }
        DataSource::KittiRaw => Err(Error::data("kitti-raw drives carry no pose ground truth; use the kitti-odom source")),
        DataSource::KittiOdom => {
            let default_stack = StackConfig::default();
            let s = stack.unwrap_or(&default_stack);
            let set = odometry_eval_set(cfg, s)?;
            let mut out = Vec::new();
            for (i, name) in eval_sequences(cfg).iter().enumerate() {
                let poses = set.sequence_poses(i).ok_or_else(|| Error::data(format!("sequence {name} has no ground-truth poses")))?;
                let frames = if stack.is_some() { Some(set.sequence_frames(i)?) } else { None };
                out.push((name.clone(), normalize_trajectory(&poses), frames));
            }
            Ok(out)
        }
    }
}

pub fn eval_odom(args: &EvalOdomArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { cfg, out: dir, .. } = load(&args.common)?;
    let opts = cfg.eval.options();
    let items = match (&args.checkpoint, &args.poses) {
        (Some(path), _) => with_model(path, |m| {
            odometry_ground_truth(&cfg, Some(m.stack()))?
                .into_iter()
                .map(|(name, gt, frames)| {
                    let pred = m.sequence(frames.as_deref().expect("frames loaded for a model"), &name)?;
                    Ok(Scored {
                        pred: trajectory_from_poses(&pred.relative),
                        name,
                        gt,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?,
        (None, Some(poses)) => {
            let gts = odometry_ground_truth(&cfg, None)?;
            if poses.is_file() && gts.len() != 1 {
                return Err(Error::config(format!("{} is a single pose file but {} sequences are evaluated; pass a directory", poses.display(), gts.len())));
            }
            gts.into_iter()
                .map(|(name, gt, _)| {
                    let file = if poses.is_dir() { poses.join(format!("{name}.txt")) } else { poses.clone() };
                    Ok(Scored {
                        pred: normalize_trajectory(&read_poses(&file)?),
                        name,
                        gt,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        (None, None) => return Err(Error::config("eval-odom needs --checkpoint or --poses")),
    };
    let reports = score(&items, &opts, &dir)?;
    write_reports(&reports, &dir, out)
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let checks: Vec<_> = all_checks().into_iter().filter(|c| args.scope == "all" || c.module == args.scope || c.name == args.scope).collect();
    if checks.is_empty() {
        let modules: std::collections::BTreeSet<_> = all_checks().iter().map(|c| c.module).collect();
        return Err(Error::config(format!(
            "no gradient check matches `{}`; use all, a module ({}) or a check name",
            args.scope,
            modules.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    if let Some(op) = &args.inject_fault {
        say(out, &format!("fault injected into the backward pass of `{op}`\n"))?;
        set_fault_injection(Some(Box::leak(op.clone().into_boxed_str())));
    }
    let mut failed = Vec::new();
    for c in &checks {
        let line = match (c.run)(args.seed) {
            Ok(r) if r.passes(c.tolerance) => format!("PASS {:<28} {:<9} max_rel {:.2e} (tol {:.0e})\n", c.name, c.module, r.max_rel_err, c.tolerance),
            Ok(r) => {
                failed.push(c.name);
                format!("FAIL {:<28} {:<9} max_rel {:.2e} (tol {:.0e})\n", c.name, c.module, r.max_rel_err, c.tolerance)
            }
            Err(e) => {
                failed.push(c.name);
                format!("FAIL {:<28} {:<9} error: {e}\n", c.name, c.module)
            }
        };
        say(out, &line)?;
    }
    set_fault_injection(None);
    if failed.is_empty() {
        say(out, &format!("{} checks passed\n", checks.len()))?;
        Ok(EXIT_OK)
    } else {
        say(out, &format!("{} of {} checks failed: {}\n", failed.len(), checks.len(), failed.join(", ")))?;
        Ok(EXIT_GRADCHECK)
    }
}

pub fn synth_gen(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { cfg, out: dir, .. } = load(args)?;
    let scene = generate_synth(&cfg.synth)?;
    save_scene(&scene, &dir)?;
    say(out, &format!("wrote {} frames to {}\n", scene.window.len(), dir.display()))
}
