use nalgebra::Vector3;
use proptest::prelude::*;
use sganvo::evalkit::{aligned_rmse, ate_snippets, depth_metrics, kitti_drift, relative_poses, rotation_distance, trajectory_from_poses, DRIFT_LENGTHS};
use sganvo::geometry::{euler_rotation, Pose6, Transform};

/// Forward-driving path: 1 m steps along the heading, which turns by
/// `yaw[k % yaw.len()]` radians per step and pitches/rolls slightly.
fn drive(steps: usize, yaw: &[f64]) -> Vec<Transform> {
    let rel: Vec<Transform> = (0..steps)
        .map(|k| {
            let y = yaw[k % yaw.len()];
            Pose6::new([0.0, 0.0, 1.0], [0.1 * y, y, -0.05 * y]).to_transform()
        })
        .collect();
    trajectory_from_poses(&rel)
}

fn scaled(traj: &[Transform], s: f64) -> Vec<Transform> {
    traj.iter().map(|t| Transform::from_parts(t.rotation(), t.translation() * s)).collect()
}

/// Best RMSE over a dense scale grid refined around the minimum; for a
/// fixed scale the optimal translation is the difference of centroids.
fn brute_force_aligned_rmse(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    let n = pred.len() as f64;
    let pm = pred.iter().sum::<Vector3<f64>>() / n;
    let gm = gt.iter().sum::<Vector3<f64>>() / n;
    let rmse = |s: f64| (pred.iter().zip(gt).map(|(p, g)| ((g - gm) - (p - pm) * s).norm_squared()).sum::<f64>() / n).sqrt();
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..6 {
        let step = (hi - lo) / 1000.0;
        let best = (0..=1000).map(|i| lo + step * i as f64).min_by(|a, b| rmse(*a).total_cmp(&rmse(*b))).unwrap();
        lo = best - step;
        hi = best + step;
    }
    rmse(0.5 * (lo + hi))
}

#[test]
fn exact_zeros_on_identical_inputs() {
    let g: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 1.5).collect();
    let m = depth_metrics(&g, &g, &vec![true; g.len()], 80.0, false).unwrap();
    assert_eq!([m.abs_rel, m.sq_rel, m.rmse, m.rmse_log], [0.0; 4]);
    assert_eq!([m.delta1, m.delta2, m.delta3], [1.0; 3]);

    let traj = drive(900, &[0.01, -0.004, 0.0, 0.002]);
    let d = kitti_drift(&traj, &traj, 10).unwrap().unwrap();
    assert_eq!((d.t_rel, d.r_rel), (0.0, 0.0));
    let a = ate_snippets(&traj, &traj, 5).unwrap();
    assert_eq!((a.mean, a.std), (0.0, 0.0));
}

#[test]
fn straight_900m_admits_every_segment_length() {
    let traj = drive(900, &[0.0]);
    let d = kitti_drift(&traj, &traj, 10).unwrap().unwrap();
    // every start k·10 with k·10 + ℓ < 900 fits each length ℓ
    let expected: usize = DRIFT_LENGTHS.iter().map(|&l| (0..900).step_by(10).filter(|&s| (s as f64) + l < 900.0).count()).sum();
    assert_eq!(d.segments, expected);
    assert!(DRIFT_LENGTHS.iter().all(|&l| l < 900.0));
}

#[test]
fn one_percent_scale_inflation() {
    let gt = drive(1000, &[0.0]);
    let d = kitti_drift(&scaled(&gt, 1.01), &gt, 10).unwrap().unwrap();
    assert!((d.t_rel - 1.0).abs() <= 0.05, "t_rel = {}", d.t_rel);
    assert_eq!(d.r_rel, 0.0);
}

#[test]
fn uniform_scale_is_removed_by_ate_alignment() {
    let gt = drive(20, &[0.05, -0.02]);
    let a = ate_snippets(&scaled(&gt, 2.0), &gt, 5).unwrap();
    assert!(a.mean < 1e-12 && a.std < 1e-12, "{a:?}");
}

#[test]
fn ate_single_offset_frame_matches_brute_force() {
    let gt = drive(4, &[0.0]);
    let mut pred = gt.clone();
    let t = pred[2].translation() + Vector3::new(0.1, 0.0, 0.0);
    pred[2] = Transform::from_parts(pred[2].rotation(), t);
    let a = ate_snippets(&pred, &gt, 5).unwrap();
    let p: Vec<Vector3<f64>> = pred.iter().map(|t| t.translation()).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|t| t.translation()).collect();
    let oracle = brute_force_aligned_rmse(&p, &g);
    assert!(a.mean > 0.0);
    assert!((a.mean - oracle).abs() < 1e-9, "{} vs {oracle}", a.mean);
}

#[test]
fn relative_poses_invert_accumulation() {
    let traj = drive(30, &[0.03, -0.01, 0.02]);
    let back = trajectory_from_poses(&relative_poses(&traj));
    for (a, b) in back.iter().zip(&traj) {
        assert!((a.0 - b.0).abs().max() < 1e-9);
    }
}

fn transform_strategy() -> impl Strategy<Value = Transform> {
    (prop::array::uniform3(-1.2f64..1.2), prop::array::uniform3(-20.0f64..20.0))
        .prop_map(|(r, t)| Transform::from_parts(euler_rotation(r), Vector3::from(t)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn deltas_are_monotone(
        pairs in prop::collection::vec((0.01f64..90.0, 0.01f64..90.0, any::<bool>()), 1..40),
        median_scale in any::<bool>(),
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let mut mask: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        mask[0] = true;
        if let Ok(m) = depth_metrics(&pred, &gt, &mask, 80.0, median_scale) {
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
            prop_assert!(m.delta1 >= 0.0);
            prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn drift_against_itself_is_zero(yaw in prop::collection::vec(-0.02f64..0.02, 1..8), len in 120usize..400) {
        let traj = drive(len, &yaw);
        let d = kitti_drift(&traj, &traj, 10).unwrap().unwrap();
        prop_assert_eq!((d.t_rel, d.r_rel), (0.0, 0.0));
    }

    #[test]
    fn one_percent_inflation_on_gentle_curves(yaw in prop::collection::vec(-0.0005f64..0.0005, 1..8)) {
        let gt = drive(900, &yaw);
        let d = kitti_drift(&scaled(&gt, 1.01), &gt, 10).unwrap().unwrap();
        prop_assert!((d.t_rel - 1.0).abs() <= 0.05, "t_rel = {}", d.t_rel);
        prop_assert_eq!(d.r_rel, 0.0);
    }

    #[test]
    fn ate_ignores_rigid_motion_and_scale_of_prediction(
        yaw in prop::collection::vec(-0.2f64..0.2, 1..5),
        noise in prop::collection::vec(prop::array::uniform3(-0.2f64..0.2), 12),
        g in transform_strategy(),
        s in 0.2f64..5.0,
    ) {
        let gt = drive(11, &yaw);
        let pred: Vec<Transform> = gt
            .iter()
            .zip(&noise)
            .map(|(t, n)| Transform::from_parts(t.rotation(), t.translation() + Vector3::from(*n)))
            .collect();
        let moved: Vec<Transform> = pred
            .iter()
            .map(|p| {
                let q = g.compose(p);
                Transform::from_parts(q.rotation(), q.translation() * s)
            })
            .collect();
        for n in [3, 5] {
            let a = ate_snippets(&pred, &gt, n).unwrap();
            let b = ate_snippets(&moved, &gt, n).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9 && (a.std - b.std).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn closed_form_alignment_matches_brute_force(pts in prop::collection::vec((prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-3.0f64..3.0)), 3..7)) {
        let p: Vec<Vector3<f64>> = pts.iter().map(|x| Vector3::from(x.0)).collect();
        let g: Vec<Vector3<f64>> = pts.iter().map(|x| Vector3::from(x.1)).collect();
        let closed = aligned_rmse(&p, &g);
        let brute = brute_force_aligned_rmse(&p, &g);
        // the grid search can only do worse than the true minimum
        prop_assert!(closed <= brute + 1e-12);
        prop_assert!(brute - closed < 1e-8, "{closed} vs {brute}");
    }

    #[test]
    fn chordal_rotation_distance_is_the_relative_angle(a in transform_strategy(), b in transform_strategy()) {
        let rel = a.inverse().compose(&b).rotation_angle();
        prop_assume!(rel < 3.0);
        prop_assert!((rotation_distance(&a, &b) - rel).abs() < 1e-9);
    }
}
