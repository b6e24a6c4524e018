//! Depth and odometry metrics.
//!
//! Depth: Abs Rel, Sq Rel, RMSE, RMSE log and the δ < 1.25^k accuracies over
//! valid ground-truth pixels, with predictions clamped to the evaluated
//! depth range. Odometry: KITTI drift over 100–800 m segments and ATE over
//! short overlapping snippets.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Transform;

/// Lower end of the evaluated depth range in metres.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Metrics over pixels where `mask` is set and the ground truth lies in
/// `(MIN_EVAL_DEPTH, cap]`. With `median_scale`, the prediction is first
/// multiplied by `median(gt) / median(pred)` over those pixels.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool], cap: f64, median_scale: bool) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::data(format!(
            "depth metrics: {} predictions, {} ground-truth values, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i] && gt[i] > MIN_EVAL_DEPTH && gt[i] <= cap).collect();
    if idx.is_empty() {
        return Err(Error::data("depth metrics: no valid ground-truth pixels under the mask"));
    }
    let g: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
    let mut p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    if median_scale {
        let s = median(&g) / median(&p);
        p.iter_mut().for_each(|v| *v *= s);
    }
    p.iter_mut().for_each(|v| *v = v.clamp(MIN_EVAL_DEPTH, cap));
    let n = g.len() as f64;
    let mut m = DepthMetrics {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
    };
    for (&p, &g) in p.iter().zip(&g) {
        let d = p - g;
        m.abs_rel += d.abs() / g;
        m.sq_rel += d * d / g;
        m.rmse += d * d;
        m.rmse_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        m.delta1 += f64::from(ratio < 1.25);
        m.delta2 += f64::from(ratio < 1.25f64.powi(2));
        m.delta3 += f64::from(ratio < 1.25f64.powi(3));
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.delta1 /= n;
    m.delta2 /= n;
    m.delta3 /= n;
    Ok(m)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Camera-to-world poses from per-pair motions, where `relative[k]` maps
/// frame k+1 coordinates into frame k: `P_0 = I`, `P_{k+1} = P_k · relative[k]`.
pub fn trajectory_from_poses(relative: &[Transform]) -> Vec<Transform> {
    let mut out = Vec::with_capacity(relative.len() + 1);
    out.push(Transform::identity());
    for r in relative {
        let last = *out.last().expect("non-empty");
        out.push(last.compose(r));
    }
    out
}

/// Inverse of [`trajectory_from_poses`].
pub fn relative_poses(traj: &[Transform]) -> Vec<Transform> {
    traj.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
}

pub const DRIFT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    /// Mean translational error, percent of segment length.
    pub t_rel: f64,
    /// Mean rotational error, degrees per 100 m.
    pub r_rel: f64,
    pub segments: usize,
}

fn path_lengths(traj: &[Transform]) -> Vec<f64> {
    let mut d = vec![0.0];
    for w in traj.windows(2) {
        let last = *d.last().expect("non-empty");
        d.push(last + (w[1].translation() - w[0].translation()).norm());
    }
    d
}

/// KITTI drift: for each segment length and every `step`-th start frame,
/// compares the relative motion over the first segment reaching that
/// length along the ground truth. `None` when no segment fits.
pub fn kitti_drift(pred: &[Transform], gt: &[Transform], step: usize) -> Result<Option<Drift>> {
    if pred.len() != gt.len() {
        return Err(Error::data(format!("drift: {} predicted poses vs {} ground-truth poses", pred.len(), gt.len())));
    }
    let dist = path_lengths(gt);
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for first in (0..gt.len()).step_by(step.max(1)) {
        for &len in &DRIFT_LENGTHS {
            let Some(last) = (first..gt.len()).find(|&j| dist[j] > dist[first] + len) else {
                continue;
            };
            let dg = gt[first].inverse().compose(&gt[last]);
            let dp = pred[first].inverse().compose(&pred[last]);
            // ‖inv(dp)·dg‖ written so identical motions give exactly zero
            t_sum += (dg.translation() - dp.translation()).norm() / len;
            r_sum += rotation_distance(&dp, &dg) / len;
            count += 1;
        }
    }
    Ok((count > 0).then(|| Drift {
        t_rel: 100.0 * t_sum / count as f64,
        r_rel: 100.0 * (r_sum / count as f64).to_degrees(),
        segments: count,
    }))
}

/// Angle of `inv(a)·b` from the chordal distance `‖R_a − R_b‖_F = 2√2·sin(θ/2)`.
pub fn rotation_distance(a: &Transform, b: &Transform) -> f64 {
    let chord = (a.rotation() - b.rotation()).norm();
    2.0 * (chord / (2.0 * std::f64::consts::SQRT_2)).min(1.0).asin()
}

/// Default start-frame stride of the drift segments.
pub const DRIFT_STEP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ate {
    pub snippet: usize,
    pub mean: f64,
    pub std: f64,
}

/// Positions of a snippet expressed in the frame of its first pose.
fn local_positions(traj: &[Transform]) -> Vec<nalgebra::Vector3<f64>> {
    let inv = traj[0].inverse();
    traj.iter().map(|t| inv.compose(t).translation()).collect()
}

/// RMSE after the least-squares scale-and-translation alignment of `pred`
/// onto `gt`.
pub fn aligned_rmse(pred: &[nalgebra::Vector3<f64>], gt: &[nalgebra::Vector3<f64>]) -> f64 {
    let n = pred.len() as f64;
    let pm = pred.iter().sum::<nalgebra::Vector3<f64>>() / n;
    let gm = gt.iter().sum::<nalgebra::Vector3<f64>>() / n;
    let num: f64 = pred.iter().zip(gt).map(|(p, g)| (p - pm).dot(&(g - gm))).sum();
    let den: f64 = pred.iter().map(|p| (p - pm).norm_squared()).sum();
    let s = if den > 0.0 { num / den } else { 0.0 };
    let sse: f64 = pred.iter().zip(gt).map(|(p, g)| ((g - gm) - (p - pm) * s).norm_squared()).sum();
    (sse / n).sqrt()
}

/// ATE over every overlapping snippet of `snippet` frames: positions are
/// taken relative to the snippet's first pose, aligned by scale and
/// translation, and the RMSE is averaged.
pub fn ate_snippets(pred: &[Transform], gt: &[Transform], snippet: usize) -> Result<Ate> {
    if pred.len() != gt.len() {
        return Err(Error::data(format!("ATE: {} predicted poses vs {} ground-truth poses", pred.len(), gt.len())));
    }
    if snippet < 2 || snippet > gt.len() {
        return Err(Error::data(format!("ATE: snippet of {snippet} frames on a {}-frame trajectory", gt.len())));
    }
    let errs: Vec<f64> = (0..=gt.len() - snippet)
        .map(|s| aligned_rmse(&local_positions(&pred[s..s + snippet]), &local_positions(&gt[s..s + snippet])))
        .collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Ate { snippet, mean, std })
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub depth: Option<DepthMetrics>,
    pub drift: Option<Drift>,
    pub ate: Vec<Ate>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(label: impl Into<String>) -> Self {
        MetricReport {
            label: label.into(),
            ..Default::default()
        }
    }

    pub const CSV_HEADER: &'static str =
        "label,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,t_rel,r_rel,ate3_mean,ate3_std,ate5_mean,ate5_std";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let d = self.depth;
        let ate = |n: usize| self.ate.iter().find(|a| a.snippet == n);
        [
            self.label.replace(',', ";"),
            f(d.map(|d| d.abs_rel)),
            f(d.map(|d| d.sq_rel)),
            f(d.map(|d| d.rmse)),
            f(d.map(|d| d.rmse_log)),
            f(d.map(|d| d.delta1)),
            f(d.map(|d| d.delta2)),
            f(d.map(|d| d.delta3)),
            f(self.drift.map(|d| d.t_rel)),
            f(self.drift.map(|d| d.r_rel)),
            f(ate(3).map(|a| a.mean)),
            f(ate(3).map(|a| a.std)),
            f(ate(5).map(|a| a.mean)),
            f(ate(5).map(|a| a.std)),
        ]
        .join(",")
    }

    pub fn table(&self) -> String {
        let mut s = format!("== {} ==\n", self.label);
        if let Some(d) = &self.depth {
            let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "AbsRel", "SqRel", "RMSE", "RMSElog", "d<1.25", "d<1.25^2", "d<1.25^3");
            let _ = writeln!(
                s,
                "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                d.abs_rel, d.sq_rel, d.rmse, d.rmse_log, d.delta1, d.delta2, d.delta3
            );
        }
        match &self.drift {
            Some(d) => {
                let _ = writeln!(s, "t_rel {:.4} %   r_rel {:.4} deg/100m   ({} segments)", d.t_rel, d.r_rel, d.segments);
            }
            None => s.push_str("drift: n/a (trajectory shorter than 100 m)\n"),
        }
        for a in &self.ate {
            let _ = writeln!(s, "ATE ({} frames): {:.4} ± {:.4} m", a.snippet, a.mean, a.std);
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    pub fn write_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// `x,z` camera positions for top-down trajectory plots.
pub fn write_trajectory_csv(traj: &[Transform], path: &Path) -> Result<()> {
    let mut s = String::from("frame,x,z\n");
    for (i, t) in traj.iter().enumerate() {
        let p = t.translation();
        let _ = writeln!(s, "{i},{:.6},{:.6}", p.x, p.z);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes poses as 12-value rows, the KITTI pose-file format.
pub fn write_poses(traj: &[Transform], path: &Path) -> Result<()> {
    let mut s = String::new();
    for t in traj {
        let row: Vec<String> = t.to_row12().iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose6;

    #[test]
    fn perfect_depth() {
        let g = [1.0, 2.0, 5.0];
        let m = depth_metrics(&g, &g, &[true; 3], 80.0, false).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn doubled_depth() {
        let g = [1.0, 2.0, 3.0];
        let p = g.map(|v| 2.0 * v);
        let m = depth_metrics(&p, &g, &[true; 3], 80.0, false).unwrap();
        assert_eq!(m.abs_rel, 1.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
        let m = depth_metrics(&p, &g, &[true; 3], 80.0, true).unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn two_pixel_example() {
        let m = depth_metrics(&[1.0, 1.0], &[1.0, 2.0], &[true; 2], 80.0, false).unwrap();
        assert_eq!(m.abs_rel, 0.25);
    }

    #[test]
    fn empty_mask_is_error() {
        assert!(depth_metrics(&[1.0], &[1.0], &[false], 80.0, false).is_err());
    }

    #[test]
    fn constant_translation_accumulates() {
        let step = Pose6::new([1.0, 0.0, 0.0], [0.0; 3]).to_transform();
        let traj = trajectory_from_poses(&[step; 5]);
        assert_eq!(traj.len(), 6);
        assert_eq!(traj[5].translation(), nalgebra::Vector3::new(5.0, 0.0, 0.0));
    }

    #[test]
    fn short_trajectory_has_no_drift() {
        let traj = trajectory_from_poses(&[Pose6::new([0.0, 0.0, 1.0], [0.0; 3]).to_transform(); 50]);
        assert_eq!(kitti_drift(&traj, &traj, 10).unwrap(), None);
    }
}
