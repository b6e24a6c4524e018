//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Operations record themselves on a graph when any input tracks gradients.
//! [`grad`] walks the graph once in reverse topological order; with
//! `create_graph` the backward computation is recorded too, which is what
//! gradient-penalty objectives need.
//!
//! ```
//! use sganvo_tensor::{grad, Tensor};
//!
//! let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap().requires_grad_leaf();
//! let y = x.mul(&x).unwrap().sum();
//! let g = grad(&y, &[&x], false).unwrap();
//! assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
//! ```

mod autograd;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use autograd::{grad, reaches};
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use ops::conv::Padding;
pub use ops::elementwise::{SELU_ALPHA, SELU_SCALE};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::ParamSet;
pub use rng::{Rng, RngState};
pub use scalar::{c, DType, Scalar};
pub use tensor::{
    is_grad_enabled, no_grad, set_detect_anomaly, set_fault_injection, take_anomaly, BackwardCtx, BackwardOp,
    GradModeGuard, Tensor,
};
