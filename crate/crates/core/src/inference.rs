//! Running a trained generator over sequences and scoring the result.

use serde::{Deserialize, Serialize};
use sganvo_tensor::{no_grad, ParamSet, Scalar};

use crate::data::{kitti::eigen_crop, to_batch, DepthMap, Frame, SequenceWindow};
use crate::error::{Error, Result};
use crate::evalkit::{ate_snippets, depth_metrics, kitti_drift, trajectory_from_poses, DepthMetrics, MetricReport, DRIFT_STEP};
use crate::geometry::{Pose6, Transform};
use crate::model::Generator;

/// Per-frame depth (metres, model resolution, row-major) and per-pair
/// motion, `relative[k]` mapping frame k+1 into frame k.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<Vec<f64>>,
    pub relative: Vec<Transform>,
}

/// Depth of every frame and the motion of every consecutive pair in one
/// window.
pub fn predict_window<T: Scalar>(generator: &Generator, params: &ParamSet<T>, window: &SequenceWindow) -> Result<(Vec<Vec<f64>>, Vec<Transform>)> {
    no_grad(|| {
        let batch = to_batch::<T>(std::slice::from_ref(window))?;
        let steps = generator.unroll(params, &batch)?;
        let depth = steps
            .iter()
            .map(|s| s.d_left[0].to_f64_vec().into_iter().map(|d| 1.0 / d).collect())
            .collect();
        let mut rel = Vec::new();
        for s in &steps[1..] {
            let p = Pose6::from_slice(&s.pose.to_f64_vec());
            if !p.is_finite() {
                return Err(Error::Numerical(format!("window {}:{} produced a non-finite pose", window.sequence, window.start)));
            }
            rel.push(p.to_transform());
        }
        Ok((depth, rel))
    })
}

/// Windows of N frames overlapping by one frame, so every consecutive pair
/// is estimated exactly once; a final window is shifted back to end on the
/// last frame.
pub fn predict_sequence<T: Scalar>(generator: &Generator, params: &ParamSet<T>, frames: &[Frame], sequence: &str) -> Result<Prediction> {
    let n = generator.cfg.window;
    if frames.len() < n {
        return Err(Error::data(format!("sequence `{sequence}` has {} frames, the stack needs {n}", frames.len())));
    }
    let (width, height) = (generator.cfg.width, generator.cfg.height);
    let mut depth: Vec<Option<Vec<f64>>> = vec![None; frames.len()];
    let mut relative: Vec<Option<Transform>> = vec![None; frames.len() - 1];
    let mut start = 0;
    loop {
        let s = start.min(frames.len() - n);
        let window = SequenceWindow {
            frames: frames[s..s + n].to_vec(),
            sequence: sequence.to_string(),
            start: s,
        };
        let (d, r) = predict_window(generator, params, &window)?;
        for (i, d) in d.into_iter().enumerate() {
            depth[s + i].get_or_insert(d);
        }
        for (i, r) in r.into_iter().enumerate() {
            relative[s + i].get_or_insert(r);
        }
        if s + n >= frames.len() {
            break;
        }
        start += n.max(2) - 1;
    }
    Ok(Prediction {
        width,
        height,
        depth: depth.into_iter().map(|d| d.expect("every frame covered")).collect(),
        relative: relative.into_iter().map(|r| r.expect("every pair covered")).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Depth cap in metres.
    pub cap: f64,
    pub median_scale: bool,
    pub eigen_crop: bool,
    /// Rescale the predicted trajectory by least squares before drift.
    pub align_scale: bool,
    pub snippets: Vec<usize>,
    pub drift_step: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cap: 80.0,
            median_scale: true,
            eigen_crop: true,
            align_scale: true,
            snippets: vec![3, 5],
            drift_step: DRIFT_STEP,
        }
    }
}

fn mean_metrics(all: &[DepthMetrics]) -> DepthMetrics {
    let n = all.len() as f64;
    let avg = |f: fn(&DepthMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    DepthMetrics {
        abs_rel: avg(|m| m.abs_rel),
        sq_rel: avg(|m| m.sq_rel),
        rmse: avg(|m| m.rmse),
        rmse_log: avg(|m| m.rmse_log),
        delta1: avg(|m| m.delta1),
        delta2: avg(|m| m.delta2),
        delta3: avg(|m| m.delta3),
    }
}

/// Per-image depth metrics averaged over frames with ground truth. Each
/// prediction is resized (nearest) to its ground-truth resolution.
pub fn evaluate_depth(preds: &[DepthMap], gts: &[DepthMap], opts: &EvalOptions) -> Result<Option<DepthMetrics>> {
    let mut all = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let p = if (p.width, p.height) == (g.width, g.height) { p.clone() } else { p.resized(g.width, g.height) };
        let mut mask = vec![!opts.eigen_crop; g.data.len()];
        if opts.eigen_crop {
            let (top, bottom, left, right) = eigen_crop(g.width, g.height);
            for y in top..bottom {
                for x in left..right {
                    mask[y * g.width + x] = true;
                }
            }
        }
        all.push(depth_metrics(&p.data, &g.data, &mask, opts.cap, opts.median_scale)?);
    }
    Ok((!all.is_empty()).then(|| mean_metrics(&all)))
}

/// Least-squares scale of `pred` positions onto `gt`.
pub fn trajectory_scale(pred: &[Transform], gt: &[Transform]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        num += p.translation().dot(&g.translation());
        den += p.translation().norm_squared();
    }
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

pub fn scale_trajectory(traj: &[Transform], s: f64) -> Vec<Transform> {
    traj.iter().map(|t| Transform::from_parts(t.rotation(), t.translation() * s)).collect()
}

/// Drift and ATE of a predicted trajectory against ground truth, both
/// starting at the identity.
pub fn evaluate_trajectory(pred: &[Transform], gt: &[Transform], opts: &EvalOptions, report: &mut MetricReport) -> Result<()> {
    let pred = if opts.align_scale {
        let s = trajectory_scale(pred, gt);
        report.notes.push(format!("trajectory scale aligned by {s:.4}"));
        scale_trajectory(pred, s)
    } else {
        pred.to_vec()
    };
    report.drift = kitti_drift(&pred, gt, opts.drift_step)?;
    for &n in &opts.snippets {
        if n <= gt.len() {
            report.ate.push(ate_snippets(&pred, gt, n)?);
        }
    }
    Ok(())
}

/// Poses re-expressed relative to the first one.
pub fn normalize_trajectory(poses: &[Transform]) -> Vec<Transform> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let inv = first.inverse();
    poses.iter().map(|p| inv.compose(p)).collect()
}

/// Ground-truth poses of `frames` relative to the first frame.
pub fn gt_trajectory(frames: &[Frame]) -> Option<Vec<Transform>> {
    let poses: Vec<Transform> = frames.iter().map(|f| f.gt_pose).collect::<Option<_>>()?;
    (!poses.is_empty()).then(|| normalize_trajectory(&poses))
}

/// Scores `pred` against whatever ground truth `frames` carry.
pub fn evaluate(label: &str, frames: &[Frame], pred: &Prediction, opts: &EvalOptions) -> Result<MetricReport> {
    let mut report = MetricReport::new(label);
    let (preds, gts): (Vec<DepthMap>, Vec<DepthMap>) = frames
        .iter()
        .zip(&pred.depth)
        .filter_map(|(f, d)| {
            f.gt_depth.as_ref().map(|g| {
                (
                    DepthMap {
                        width: pred.width,
                        height: pred.height,
                        data: d.clone(),
                    },
                    g.clone(),
                )
            })
        })
        .unzip();
    report.depth = evaluate_depth(&preds, &gts, opts)?;
    if report.depth.is_some() {
        if opts.eigen_crop {
            report.notes.push("depth evaluated inside the Eigen crop".into());
        }
        if opts.median_scale {
            report.notes.push("depth median-scaled per image".into());
        }
    }
    if let Some(gt) = gt_trajectory(frames) {
        evaluate_trajectory(&trajectory_from_poses(&pred.relative), &gt, opts, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gt_depth_scores_zero() {
        let mut g = DepthMap::new(20, 10);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = 1.0 + (i % 7) as f64;
        }
        let opts = EvalOptions {
            median_scale: false,
            ..Default::default()
        };
        let m = evaluate_depth(&[g.clone()], &[g], &opts).unwrap().unwrap();
        assert_eq!((m.abs_rel, m.rmse, m.delta1, m.delta3), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn scale_alignment_recovers_factor() {
        let gt: Vec<Transform> = (0..5).map(|i| Transform::translation_only([0.0, 0.0, i as f64])).collect();
        let pred = scale_trajectory(&gt, 0.25);
        assert!((trajectory_scale(&pred, &gt) - 4.0).abs() < 1e-12);
    }
}
