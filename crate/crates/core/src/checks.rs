//! Finite-difference checks of the model-level gradient paths, registered
//! next to the tensor primitives for the `gradcheck` command.

use sganvo_tensor::gradcheck::{check_gradients, primitive_checks, tracked, GradCheck, FD_STEP, FD_TOL};
use sganvo_tensor::{ParamSet, Rng, Tensor, TensorError};

use crate::error::Error;
use crate::geometry::{warp_image, Intrinsics};
use crate::layers::{ConvLstmCell, DepthNet, DepthNetConfig, Discriminator, LstmState, PoseNet, PoseNetConfig};
use crate::losses::{discriminator_layer_loss, disparity_consistency, Signs};

/// Relative-error threshold of the view-reconstruction checks.
pub const GEOMETRY_TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

type TResult<T> = sganvo_tensor::Result<T>;

fn lift(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "check",
            msg: other.to_string(),
        },
    }
}

fn project(y: &Tensor<f64>, seed: u64) -> TResult<Tensor<f64>> {
    let r = Rng::with_stream(seed, 77).uniform_tensor::<f64>(y.shape(), -1.0, 1.0);
    Ok(y.mul(&r)?.sum())
}

/// Smooth random image so bilinear sampling has informative gradients.
fn smooth_image(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let phase: Vec<f64> = (0..c * 4).map(|_| rng.uniform_range(0.0, 6.28)).collect();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let p = &phase[ch * 4..ch * 4 + 4];
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                data.push(0.5 + 0.2 * (0.7 * xf + p[0]).sin() + 0.15 * (0.9 * yf + p[1]).cos() + 0.1 * (0.4 * (xf + yf) + p[2]).sin());
            }
        }
    }
    Tensor::from_vec(data, &[1, c, h, w]).expect("positive extents")
}

struct WarpCase {
    src: Tensor<f64>,
    inv_depth: Tensor<f64>,
    pose: Tensor<f64>,
    k: Intrinsics,
}

fn warp_case(seed: u64) -> WarpCase {
    let mut rng = Rng::new(seed);
    let (h, w) = (6, 8);
    let k = Intrinsics::new(7.0, 6.5, 3.6, 2.4, w, h).expect("valid intrinsics");
    let src = smooth_image(&mut rng, 2, h, w);
    let inv_depth = rng.uniform_tensor(&[1, 1, h, w], 0.3, 0.6);
    let pose: Vec<f64> = (0..6).map(|i| if i < 3 { rng.uniform_range(-0.15, 0.15) } else { rng.uniform_range(-0.04, 0.04) }).collect();
    WarpCase {
        src,
        inv_depth,
        pose: Tensor::from_vec(pose, &[1, 6]).expect("six values"),
        k,
    }
}

fn warp_loss(src: &Tensor<f64>, inv_depth: &Tensor<f64>, k: &Intrinsics, pose: &Tensor<f64>, seed: u64) -> TResult<Tensor<f64>> {
    let warp = warp_image(src, inv_depth, k, pose).map_err(lift)?;
    project(&warp.image, seed)
}

fn small_pose_cfg() -> PoseNetConfig {
    PoseNetConfig {
        channels: vec![4, 6],
        head_hidden: 5,
        r_scale: 0.01,
    }
}

/// Gradient checks of geometry, network blocks and losses.
pub fn model_checks() -> Vec<GradCheck> {
    vec![
        GradCheck {
            name: "warp_inverse_depth",
            module: "geometry",
            tolerance: GEOMETRY_TOL,
            run: |seed| {
                let c = warp_case(seed);
                check_gradients(|a: &[Tensor<f64>]| warp_loss(&c.src, &a[0], &c.k, &c.pose, seed), &[c.inv_depth.clone()], FD_STEP, FLOOR)
            },
        },
        GradCheck {
            name: "warp_pose",
            module: "geometry",
            tolerance: GEOMETRY_TOL,
            run: |seed| {
                let c = warp_case(seed);
                check_gradients(|a: &[Tensor<f64>]| warp_loss(&c.src, &c.inv_depth, &c.k, &a[0], seed), &[c.pose.clone()], FD_STEP, FLOOR)
            },
        },
        GradCheck {
            name: "warp_source",
            module: "geometry",
            tolerance: GEOMETRY_TOL,
            run: |seed| {
                let c = warp_case(seed);
                check_gradients(|a: &[Tensor<f64>]| warp_loss(&a[0], &c.inv_depth, &c.k, &c.pose, seed), &[c.src.clone()], FD_STEP, FLOOR)
            },
        },
        GradCheck {
            name: "convlstm_step",
            module: "layers",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let mut p = ParamSet::new();
                let cell = ConvLstmCell::new(&mut p, &mut rng, "lstm", 2, 3);
                let x = rng.uniform_tensor::<f64>(&[1, 2, 4, 5], -1.0, 1.0);
                let h = rng.uniform_tensor::<f64>(&[1, 3, 4, 5], -0.5, 0.5);
                let c = rng.uniform_tensor::<f64>(&[1, 3, 4, 5], -0.5, 0.5);
                check_gradients(
                    |a: &[Tensor<f64>]| {
                        let s = cell.step(&p, &a[0], &LstmState { h: a[1].clone(), c: a[2].clone() }).map_err(lift)?;
                        Ok(project(&s.h, seed)?.add(&project(&s.c, seed + 1)?)?)
                    },
                    &[x, h, c],
                    FD_STEP,
                    FLOOR,
                )
            },
        },
        GradCheck {
            name: "depth_net",
            module: "layers",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let mut p = ParamSet::new();
                let cfg = DepthNetConfig {
                    encoder: vec![4, 6],
                    decoder: vec![4, 3],
                    branch: vec![4, 3],
                    init_inverse_depth: 0.25,
                };
                let net = DepthNet::new(&mut p, &mut rng, "depth", 3, 2, &cfg).map_err(lift)?;
                let x = rng.uniform_tensor::<f64>(&[1, 3, 8, 8], 0.0, 1.0);
                check_gradients(
                    |a: &[Tensor<f64>]| {
                        let out = net.forward(&p, &a[0]).map_err(lift)?;
                        let mut total = Tensor::scalar(0.0);
                        for (i, d) in out.left.iter().chain(&out.right).enumerate() {
                            total = total.add(&project(d, seed + i as u64)?)?;
                        }
                        Ok(total)
                    },
                    &[x],
                    FD_STEP,
                    FLOOR,
                )
            },
        },
        GradCheck {
            name: "pose_net",
            module: "layers",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let mut p = ParamSet::new();
                let net = PoseNet::new(&mut p, &mut rng, "pose", 3, &small_pose_cfg()).map_err(lift)?;
                // the output layers start at zero; randomize them so the
                // input gradient is not trivially zero
                for head in ["trans_fc1", "rot_fc1"] {
                    let w = rng.uniform_tensor::<f64>(&[5, 3], -1.0, 1.0);
                    p.insert(format!("pose/{head}/weight"), &w);
                }
                let x = rng.uniform_tensor::<f64>(&[2, 3, 8, 8], 0.0, 1.0);
                check_gradients(|a: &[Tensor<f64>]| project(&net.forward(&p, &a[0]).map_err(lift)?, seed), &[x], FD_STEP, FLOOR)
            },
        },
        GradCheck {
            name: "disparity_consistency",
            module: "losses",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let l0 = rng.uniform_tensor::<f64>(&[1, 1, 4, 4], 0.1, 0.4);
                let r0 = rng.uniform_tensor::<f64>(&[1, 1, 4, 4], 0.6, 0.9);
                let l1 = rng.uniform_tensor::<f64>(&[1, 1, 2, 2], 0.6, 0.9);
                let r1 = rng.uniform_tensor::<f64>(&[1, 1, 2, 2], 0.1, 0.4);
                check_gradients(
                    |a: &[Tensor<f64>]| {
                        disparity_consistency(&[vec![a[0].clone(), a[1].clone()]], &[vec![a[2].clone(), a[3].clone()]]).map_err(lift)
                    },
                    &[l0, l1, r0, r1],
                    FD_STEP,
                    FLOOR,
                )
            },
        },
        GradCheck {
            name: "penalty_linear_critic",
            module: "losses",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let real = rng.uniform_tensor::<f64>(&[3, 2], -1.0, 1.0);
                let fake = rng.uniform_tensor::<f64>(&[3, 2], -1.0, 1.0);
                let w = rng.uniform_tensor::<f64>(&[2, 1], 0.3, 1.5);
                check_gradients(
                    |a: &[Tensor<f64>]| {
                        let w = tracked(&a[0]);
                        let critic = |x: &Tensor<f64>| Ok(x.matmul(&w)?.reshape(&[x.dim(0)])?);
                        let mut eps_rng = Rng::with_stream(seed, 5);
                        let loss = discriminator_layer_loss(critic, &real, &fake, &mut eps_rng, 10.0, Signs::Standard).map_err(lift)?;
                        Ok(loss.penalty)
                    },
                    &[w],
                    FD_STEP,
                    FLOOR,
                )
            },
        },
        GradCheck {
            name: "penalty_conv_critic",
            module: "losses",
            tolerance: FD_TOL,
            run: |seed| {
                let mut rng = Rng::new(seed);
                let mut p = ParamSet::new();
                let critic = Discriminator::new(&mut p, &mut rng, "disc", 1);
                // the first bias keeps the check small while the penalty
                // gradient still runs back through every layer
                let name = "disc/conv0/bias".to_string();
                let w = rng.uniform_tensor::<f64>(p.get(&name)?.shape(), -0.1, 0.1);
                let real = rng.uniform_tensor::<f64>(&[2, 1, 16, 16], 0.0, 1.0);
                let fake = rng.uniform_tensor::<f64>(&[2, 1, 16, 16], 0.0, 1.0);
                check_gradients(
                    |a: &[Tensor<f64>]| {
                        let mut q = p.clone();
                        q.bind(name.clone(), &tracked(&a[0]));
                        let f = |x: &Tensor<f64>| critic.forward(&q, x);
                        let mut eps_rng = Rng::with_stream(seed, 5);
                        let loss = discriminator_layer_loss(f, &real, &fake, &mut eps_rng, 10.0, Signs::Standard).map_err(lift)?;
                        Ok(loss.total)
                    },
                    &[w],
                    FD_STEP,
                    FLOOR,
                )
            },
        },
    ]
}

/// Every registered check: tensor primitives first, then model paths.
pub fn all_checks() -> Vec<GradCheck> {
    let mut all = primitive_checks();
    all.extend(model_checks());
    all
}
