use sganvo::data::synth::{generate_synth, SynthSceneSpec};
use sganvo::geometry::{reproject, warp_image, Pose6};
use sganvo_tensor::Tensor;

fn pose_tensor(p: &Pose6) -> Tensor<f64> {
    Tensor::from_vec(p.to_array().to_vec(), &[1, 6]).unwrap()
}

fn masked_mean_abs(a: &Tensor<f64>, b: &Tensor<f64>, mask: &Tensor<f64>) -> (f64, usize) {
    let (a, b, m) = (a.to_vec(), b.to_vec(), mask.to_vec());
    let plane = m.len();
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if m[i % plane] > 0.0 {
            sum += (x - y).abs();
            n += 1;
        }
    }
    (sum / n as f64, n)
}

fn scene_errors(spec: &SynthSceneSpec) -> Vec<f64> {
    let scene = generate_synth(spec).unwrap();
    let k = scene.window.frames[0].calib.intrinsics;
    let mut out = Vec::new();
    for (step, rel) in scene.relative.iter().enumerate() {
        let src = scene.window.frames[step].left.to_tensor::<f64>();
        let tgt = scene.window.frames[step + 1].left.to_tensor::<f64>();
        let inv = Tensor::from_vec(scene.inverse_depth[step + 1].clone(), &[1, 1, k.height, k.width]).unwrap();
        let w = warp_image(&src, &inv, &k, &pose_tensor(rel)).unwrap();
        let (err, n) = masked_mean_abs(&w.image, &tgt, &w.mask);
        assert!(n > k.width * k.height * 3 / 2);
        out.push(err);
    }
    out
}

#[test]
fn ground_truth_warp_reproduces_next_frame() {
    for seed in [1, 7, 42] {
        let spec = SynthSceneSpec {
            texture_seed: seed,
            ..Default::default()
        };
        for err in scene_errors(&spec) {
            assert!(err < 1e-3, "seed {seed}: mean abs error {err}");
        }
    }
}

#[test]
fn identity_warp_is_exact() {
    let scene = generate_synth(&SynthSceneSpec::default()).unwrap();
    let f = &scene.window.frames[1];
    let k = f.calib.intrinsics;
    let src = f.left.to_tensor::<f64>();
    let inv = Tensor::from_vec(scene.inverse_depth[1].clone(), &[1, 1, k.height, k.width]).unwrap();
    let w = warp_image(&src, &inv, &k, &Tensor::zeros(&[1, 6])).unwrap();
    let (err, _) = masked_mean_abs(&w.image, &src, &w.mask);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn linear_ramp_shift_matches_reprojection() {
    // a ramp is reproduced exactly by bilinear interpolation
    let (w, h) = (40, 16);
    let k = sganvo::geometry::Intrinsics::new(100.0, 100.0, 20.0, 8.0, w, h).unwrap();
    let ramp: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| 0.01 * x as f64 + 0.003 * y as f64)).collect();
    let src = Tensor::from_vec(ramp, &[1, 1, h, w]).unwrap();
    let inv = Tensor::full(&[1, 1, h, w], 0.5);
    let pose = Pose6::new([0.05, 0.0, 0.0], [0.0; 3]);
    let out = warp_image(&src, &inv, &k, &pose_tensor(&pose)).unwrap();
    let (img, mask) = (out.image.to_vec(), out.mask.to_vec());
    let shift = 100.0 * 0.05 / 2.0;
    let mut checked = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] > 0.0 {
                let (u, v) = reproject(x as f64, y as f64, 0.5, &k, &pose.to_transform()).unwrap();
                assert!((u - x as f64 - shift).abs() < 1e-12 && (v - y as f64).abs() < 1e-12);
                let expect = 0.01 * u + 0.003 * v;
                assert!((img[i] - expect).abs() < 1e-6);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}
