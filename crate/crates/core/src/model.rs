//! The stacked network: a bottom layer that reconstructs the current frame
//! from depth and ego-motion, higher layers that predict the error images
//! of the layer below, a ConvLSTM per layer and one critic per layer.

use serde::{Deserialize, Serialize};
use sganvo_tensor::{Padding, ParamSet, Rng, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{warp_image, Intrinsics};
use crate::layers::{Conv2d, ConvLstmCell, DepthNet, DepthNetConfig, Discriminator, LstmState, PoseNet, PoseNetConfig, CRITIC_MIN_SIZE};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    /// Number of layers above the bottom one.
    pub layers: usize,
    /// Frames per unrolled window.
    pub window: usize,
    pub width: usize,
    pub height: usize,
    /// Channels of A^l for l = 1..=L; defaults to 32·2^(l−1).
    pub a_channels: Option<Vec<usize>>,
    /// ConvLSTM hidden channels for l = 0..=L; defaults to 8 at the bottom and
    /// 32·2^(l−1) above.
    pub r_channels: Option<Vec<usize>>,
    /// Kernel of the convolution predicting Â^l.
    pub ahat_kernel: usize,
    /// Depth scales produced by the depth net.
    pub scales: usize,
    /// Per-layer loss weights for l = 0..=L; defaults to 1 at the bottom and
    /// 0.1 above.
    pub lambda_layer: Option<Vec<f64>>,
    /// Per-step loss weights for t = 1..=N; defaults to 1/N each.
    pub lambda_step: Option<Vec<f64>>,
    pub depth: DepthNetConfig,
    pub pose: PoseNetConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            layers: 1,
            window: 3,
            width: 64,
            height: 32,
            a_channels: None,
            r_channels: None,
            ahat_kernel: 3,
            scales: 4,
            lambda_layer: None,
            lambda_step: None,
            depth: DepthNetConfig::default(),
            pose: PoseNetConfig::default(),
        }
    }
}

impl StackConfig {
    pub fn a_channels(&self) -> Vec<usize> {
        self.a_channels.clone().unwrap_or_else(|| (1..=self.layers).map(|l| 32 << (l - 1)).collect())
    }

    pub fn r_channels(&self) -> Vec<usize> {
        self.r_channels
            .clone()
            .unwrap_or_else(|| (0..=self.layers).map(|l| if l == 0 { 8 } else { 32 << (l - 1) }).collect())
    }

    pub fn lambda_layer(&self) -> Vec<f64> {
        self.lambda_layer
            .clone()
            .unwrap_or_else(|| (0..=self.layers).map(|l| if l == 0 { 1.0 } else { 0.1 }).collect())
    }

    pub fn lambda_step(&self) -> Vec<f64> {
        self.lambda_step.clone().unwrap_or_else(|| vec![1.0 / self.window as f64; self.window])
    }

    /// Same configuration with every defaulted list written out.
    pub fn resolved(&self) -> Self {
        StackConfig {
            a_channels: Some(self.a_channels()),
            r_channels: Some(self.r_channels()),
            lambda_layer: Some(self.lambda_layer()),
            lambda_step: Some(self.lambda_step()),
            ..self.clone()
        }
    }

    /// Channels of the error unit E^l.
    pub fn error_channels(&self, l: usize) -> usize {
        if l == 0 {
            2 * IMAGE_CHANNELS
        } else {
            2 * self.a_channels()[l - 1]
        }
    }

    /// Channels of the critic input at layer l.
    pub fn target_channels(&self, l: usize) -> usize {
        if l == 0 {
            IMAGE_CHANNELS
        } else {
            self.a_channels()[l - 1]
        }
    }

    /// `(height, width)` of layer l.
    pub fn layer_size(&self, l: usize) -> (usize, usize) {
        (self.height >> l, self.width >> l)
    }

    /// Checks every field, naming each violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let l = self.layers;
        if self.window < 2 {
            errs.push(format!("stack.window = {} must be at least 2", self.window));
        }
        if self.a_channels().len() != l || self.a_channels().contains(&0) {
            errs.push(format!("stack.a_channels must list {l} positive widths"));
        }
        if self.r_channels().len() != l + 1 || self.r_channels().contains(&0) {
            errs.push(format!("stack.r_channels must list {} positive widths", l + 1));
        }
        let ll = self.lambda_layer();
        if ll.len() != l + 1 || ll.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            errs.push(format!("stack.lambda_layer must list {} non-negative weights", l + 1));
        }
        let lt = self.lambda_step();
        if lt.len() != self.window || lt.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            errs.push(format!("stack.lambda_step must list {} non-negative weights", self.window));
        }
        if self.ahat_kernel % 2 == 0 {
            errs.push(format!("stack.ahat_kernel = {} must be odd", self.ahat_kernel));
        }
        let levels = self.depth.encoder.len();
        if self.scales == 0 || self.scales > levels {
            errs.push(format!("stack.scales = {} must be in 1..={levels}", self.scales));
        }
        let factor = 1usize << levels.max(l);
        if self.width == 0 || self.height == 0 || self.width % factor != 0 || self.height % factor != 0 {
            errs.push(format!("stack.width/height = {}x{} must be positive multiples of {factor}", self.width, self.height));
        }
        let (h, w) = self.layer_size(l);
        if h < CRITIC_MIN_SIZE || w < CRITIC_MIN_SIZE {
            errs.push(format!(
                "stack.layers = {l} leaves a {w}x{h} top layer at {}x{}; the critic needs at least {CRITIC_MIN_SIZE} in each dimension",
                self.width, self.height
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Recurrent state of one layer.
#[derive(Clone)]
pub struct LayerState<T: Scalar> {
    pub index: usize,
    pub r: LstmState<T>,
    pub e: Tensor<T>,
    /// Target of the layer: the masked frame at the bottom, A^l above.
    pub a: Tensor<T>,
    /// Prediction of the layer: the masked reconstruction at the bottom, Â^l
    /// above.
    pub a_hat: Tensor<T>,
}

/// Stereo frames of a batch of windows, one `[B, 3, H, W]` tensor per
/// frame.
#[derive(Clone)]
pub struct WindowBatch<T: Scalar> {
    pub left: Vec<Tensor<T>>,
    pub right: Vec<Tensor<T>>,
    pub intrinsics: Intrinsics,
}

impl<T: Scalar> WindowBatch<T> {
    pub fn batch(&self) -> usize {
        self.left[0].dim(0)
    }
}

#[derive(Clone)]
pub struct StepOutput<T: Scalar> {
    /// Inverse depth per scale, finest first.
    pub d_left: Vec<Tensor<T>>,
    pub d_right: Vec<Tensor<T>>,
    /// `[B, 6]` motion from the current to the previous camera.
    pub pose: Tensor<T>,
    pub i_hat: Tensor<T>,
    pub mask: Tensor<T>,
    pub e: Vec<Tensor<T>>,
    pub a: Vec<Tensor<T>>,
    pub a_hat: Vec<Tensor<T>>,
}

/// Generator modules; parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: StackConfig,
    lstm: Vec<ConvLstmCell>,
    depth: DepthNet,
    pose: PoseNet,
    a_conv: Vec<Conv2d>,
    ahat_conv: Vec<Conv2d>,
}

/// One critic per layer.
#[derive(Debug, Clone)]
pub struct Critics {
    pub layers: Vec<Discriminator>,
}

/// Generator and critics with freshly initialized parameters.
pub struct Sganvo<T: Scalar> {
    pub generator: Generator,
    pub critics: Critics,
    pub g_params: ParamSet<T>,
    pub d_params: ParamSet<T>,
}

impl<T: Scalar> Sganvo<T> {
    pub fn new(cfg: &StackConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let mut rng = Rng::with_stream(seed, 1);
        let mut g = ParamSet::new();
        let mut d = ParamSet::new();
        let r = cfg.r_channels();
        let a = cfg.a_channels();
        let l_top = cfg.layers;

        let lstm = (0..=l_top)
            .map(|l| {
                let above = if l < l_top { r[l + 1] } else { 0 };
                ConvLstmCell::new(&mut g, &mut rng, &format!("layer{l}/lstm"), cfg.error_channels(l) + above, r[l])
            })
            .collect();
        let stereo_in = 2 * IMAGE_CHANNELS + r[0];
        let depth = DepthNet::new(&mut g, &mut rng, "layer0/depth", stereo_in, cfg.scales, &cfg.depth)?;
        let pose = PoseNet::new(&mut g, &mut rng, "layer0/pose", stereo_in, &cfg.pose)?;
        let mut a_conv = Vec::new();
        let mut ahat_conv = Vec::new();
        for l in 1..=l_top {
            let ch = a[l - 1];
            a_conv.push(Conv2d::new(&mut g, &mut rng, &format!("layer{l}/a_conv"), cfg.error_channels(l - 1), ch, 3, 1, Padding::Same));
            ahat_conv.push(Conv2d::new(&mut g, &mut rng, &format!("layer{l}/ahat_conv"), r[l], ch, cfg.ahat_kernel, 1, Padding::Same));
        }
        let critics = Critics {
            layers: (0..=l_top)
                .map(|l| Discriminator::new(&mut d, &mut rng, &format!("layer{l}/disc"), cfg.target_channels(l)))
                .collect(),
        };
        Ok(Sganvo {
            generator: Generator {
                cfg,
                lstm,
                depth,
                pose,
                a_conv,
                ahat_conv,
            },
            critics,
            g_params: g,
            d_params: d,
        })
    }
}

impl Generator {
    /// All-zero states for a batch of `batch` windows.
    pub fn init_states<T: Scalar>(&self, batch: usize) -> Vec<LayerState<T>> {
        let r = self.cfg.r_channels();
        (0..=self.cfg.layers)
            .map(|l| {
                let (h, w) = self.cfg.layer_size(l);
                let tc = self.cfg.target_channels(l);
                LayerState {
                    index: l,
                    r: LstmState::zeros(batch, r[l], h, w),
                    e: Tensor::zeros(&[batch, self.cfg.error_channels(l), h, w]),
                    a: Tensor::zeros(&[batch, tc, h, w]),
                    a_hat: Tensor::zeros(&[batch, tc, h, w]),
                }
            })
            .collect()
    }

    /// Updates R^l from the top layer down; layer l sees the upsampled state
    /// of layer l+1 from the same step.
    pub fn top_down_pass<T: Scalar>(&self, p: &ParamSet<T>, states: &mut [LayerState<T>]) -> Result<()> {
        let top = self.cfg.layers;
        for l in (0..=top).rev() {
            let input = if l == top {
                states[l].e.clone()
            } else {
                let above = states[l + 1].r.h.upsample_nearest2x()?;
                Tensor::concat(&[&states[l].e, &above], 1)?
            };
            states[l].r = self.lstm[l].step(p, &input, &states[l].r)?;
        }
        Ok(())
    }

    /// Depth, pose and view reconstruction at the bottom layer; sets E^0.
    #[allow(clippy::type_complexity)]
    pub fn bottom_forward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        states: &mut [LayerState<T>],
        prev: &Tensor<T>,
        curr: &Tensor<T>,
        right: &Tensor<T>,
        k: &Intrinsics,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        let r0 = states[0].r.h.clone();
        let depth = self.depth.forward(p, &Tensor::concat(&[curr, right, &r0], 1)?)?;
        let pose = self.pose.forward(p, &Tensor::concat(&[prev, curr, &r0], 1)?)?;
        let warp = warp_image(prev, &depth.left[0], k, &pose)?;
        let diff = curr.sub(&warp.image)?;
        let e = Tensor::concat(&[&diff.relu(), &diff.neg().relu()], 1)?.mul(&warp.mask)?;
        states[0].e = e;
        states[0].a = curr.mul(&warp.mask)?;
        states[0].a_hat = warp.image.mul(&warp.mask)?;
        Ok((depth.left, depth.right, pose, warp.image, warp.mask))
    }

    /// A^l, Â^l and E^l of layer `l ≥ 1` from the error image below.
    pub fn higher_forward<T: Scalar>(&self, p: &ParamSet<T>, states: &mut [LayerState<T>], l: usize) -> Result<()> {
        if l == 0 || l > self.cfg.layers {
            return Err(Error::config(format!("higher_forward: layer {l} is not a higher layer")));
        }
        let a = self.a_conv[l - 1].forward(p, &states[l - 1].e)?.relu().max_pool2d()?;
        let a_hat = self.ahat_conv[l - 1].forward(p, &states[l].r.h)?.relu();
        let diff = a.sub(&a_hat)?;
        states[l].e = Tensor::concat(&[&diff.relu(), &diff.neg().relu()], 1)?;
        states[l].a = a;
        states[l].a_hat = a_hat;
        Ok(())
    }

    /// Runs one window from zero states. Step 1 pairs the first frame with
    /// itself; step t pairs frames t−2 and t−1 (0-based).
    pub fn unroll<T: Scalar>(&self, p: &ParamSet<T>, batch: &WindowBatch<T>) -> Result<Vec<StepOutput<T>>> {
        let n = self.cfg.window;
        if batch.left.len() != n || batch.right.len() != n {
            return Err(Error::config(format!(
                "window holds {} left / {} right frames, stack expects {n}",
                batch.left.len(),
                batch.right.len()
            )));
        }
        let k = &batch.intrinsics;
        if k.width != self.cfg.width || k.height != self.cfg.height {
            return Err(Error::config(format!(
                "frames are {}x{} but the stack is configured for {}x{}",
                k.width, k.height, self.cfg.width, self.cfg.height
            )));
        }
        let mut states = self.init_states::<T>(batch.batch());
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let prev = &batch.left[t.saturating_sub(1)];
            let curr = &batch.left[t];
            self.top_down_pass(p, &mut states)?;
            let (d_left, d_right, pose, i_hat, mask) = self.bottom_forward(p, &mut states, prev, curr, &batch.right[t], k)?;
            for l in 1..=self.cfg.layers {
                self.higher_forward(p, &mut states, l)?;
            }
            out.push(StepOutput {
                d_left,
                d_right,
                pose,
                i_hat,
                mask,
                e: states.iter().map(|s| s.e.clone()).collect(),
                a: states.iter().map(|s| s.a.clone()).collect(),
                a_hat: states.iter().map(|s| s.a_hat.clone()).collect(),
            });
        }
        Ok(out)
    }
}

impl Critics {
    /// Critic values `[B]` of layer l.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, l: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.layers[l].forward(p, x)
    }
}

/// Real and generated critic inputs of every layer, with all steps stacked
/// along the batch axis.
pub fn critic_inputs<T: Scalar>(steps: &[StepOutput<T>], layers: usize) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    (0..=layers)
        .map(|l| {
            let real: Vec<&Tensor<T>> = steps.iter().map(|s| &s.a[l]).collect();
            let fake: Vec<&Tensor<T>> = steps.iter().map(|s| &s.a_hat[l]).collect();
            Ok((Tensor::concat(&real, 0)?, Tensor::concat(&fake, 0)?))
        })
        .collect()
}
