//! Network building blocks. Each module stores parameter names only; the
//! values live in a [`ParamSet`] passed to `forward`, so generator and
//! discriminator parameters can be optimized and checkpointed separately.

use serde::{Deserialize, Serialize};
use sganvo_tensor::{Padding, ParamSet, Rng, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{D_MAX, D_MIN};

fn lecun_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let weight = format!("{name}/weight");
        let bias = format!("{name}/bias");
        let fan_in = in_channels * kernel * kernel;
        params.insert(&weight, &lecun_uniform::<T>(rng, &[out_channels, in_channels, kernel, kernel], fan_in));
        params.insert(&bias, &Tensor::zeros(&[1, out_channels, 1, 1]));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_padded(p, x, self.padding)
    }

    fn forward_padded<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.dim(1) != self.in_channels {
            return Err(Error::config(format!(
                "{}: expected [B, {}, H, W] input, got {:?}",
                self.weight,
                self.in_channels,
                x.shape()
            )));
        }
        let y = x.conv2d(p.get(&self.weight)?, self.stride, padding)?;
        Ok(y.add(p.get(&self.bias)?)?)
    }
}

/// Fully connected layer on `[B, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
}

impl Linear {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, rng: &mut Rng, name: &str, inputs: usize, outputs: usize, zero: bool) -> Self {
        let weight = format!("{name}/weight");
        let bias = format!("{name}/bias");
        let w = if zero {
            Tensor::zeros(&[inputs, outputs])
        } else {
            lecun_uniform::<T>(rng, &[inputs, outputs], inputs)
        };
        params.insert(&weight, &w);
        params.insert(&bias, &Tensor::zeros(&[1, outputs]));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.matmul(p.get(&self.weight)?)?.add(p.get(&self.bias)?)?)
    }
}

fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    Ok(x.sum_to(&[b, c, 1, 1])?.mul_scalar(1.0 / (h * w) as f64).reshape(&[b, c])?)
}

/// Hidden and cell state of a ConvLSTM.
#[derive(Clone)]
pub struct LstmState<T: Scalar> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        let z = Tensor::zeros(&[batch, channels, height, width]);
        LstmState { h: z.clone(), c: z }
    }
}

/// Convolutional LSTM with 3×3 gate kernels over `concat(input, h)`.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub input_channels: usize,
    pub hidden_channels: usize,
    gates: Conv2d,
}

impl ConvLstmCell {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, rng: &mut Rng, name: &str, input_channels: usize, hidden_channels: usize) -> Self {
        let gates = Conv2d::new(params, rng, &format!("{name}/gates"), input_channels + hidden_channels, 4 * hidden_channels, 3, 1, Padding::Same);
        ConvLstmCell {
            input_channels,
            hidden_channels,
            gates,
        }
    }

    /// One recurrence step. `input` is the level input (the previous error
    /// image, with the upsampled state of the layer above already
    /// concatenated where one exists).
    pub fn step<T: Scalar>(&self, p: &ParamSet<T>, input: &Tensor<T>, prev: &LstmState<T>) -> Result<LstmState<T>> {
        if input.ndim() != 4 || input.dim(1) != self.input_channels || input.shape()[2..] != prev.h.shape()[2..] {
            return Err(Error::config(format!(
                "convlstm: input {:?} does not conform to {} channels and state {:?}",
                input.shape(),
                self.input_channels,
                prev.h.shape()
            )));
        }
        let z = self.gates.forward(p, &Tensor::concat(&[input, &prev.h], 1)?)?;
        let hc = self.hidden_channels;
        let i = z.slice(1, 0, hc)?.sigmoid();
        let f = z.slice(1, hc, hc)?.sigmoid();
        let o = z.slice(1, 2 * hc, hc)?.sigmoid();
        let g = z.slice(1, 3 * hc, hc)?.tanh();
        let c = f.mul(&prev.c)?.add(&i.mul(&g)?)?;
        let h = o.mul(&c.tanh())?;
        Ok(LstmState { h, c })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthNetConfig {
    /// Channels of the stride-2 encoder stages.
    pub encoder: Vec<usize>,
    /// Channels of the decoder stage fed by each sub-pixel branch, coarse to
    /// fine; same length as `encoder`.
    pub decoder: Vec<usize>,
    /// Inner widths of each sub-pixel branch; the branch ends in 4 channels
    /// shuffled into one channel at twice the resolution.
    pub branch: Vec<usize>,
    /// Inverse depth the heads produce before training.
    pub init_inverse_depth: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        DepthNetConfig {
            encoder: vec![32, 64, 128, 256],
            decoder: vec![128, 64, 32, 16],
            branch: vec![64, 32],
            init_inverse_depth: 0.25,
        }
    }
}

/// Encoder–decoder producing left and right inverse-depth maps at several
/// scales, finest first.
#[derive(Debug, Clone)]
pub struct DepthNet {
    encoder: Vec<Conv2d>,
    branches: Vec<Vec<Conv2d>>,
    iconvs: Vec<Conv2d>,
    heads: Vec<Conv2d>,
    pub in_channels: usize,
    pub scales: usize,
}

/// Per-scale left and right inverse depth, each `[B, 1, H_s, W_s]`.
#[derive(Clone)]
pub struct DepthPyramid<T: Scalar> {
    pub left: Vec<Tensor<T>>,
    pub right: Vec<Tensor<T>>,
}

impl DepthNet {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, rng: &mut Rng, name: &str, in_channels: usize, scales: usize, cfg: &DepthNetConfig) -> Result<Self> {
        let levels = cfg.encoder.len();
        if levels == 0 || cfg.decoder.len() != levels || scales == 0 || scales > levels {
            return Err(Error::config(format!(
                "depth net: {levels} encoder stages, {} decoder stages and {scales} scales do not fit together",
                cfg.decoder.len()
            )));
        }
        let mut encoder = Vec::new();
        let mut ch = in_channels;
        for (i, &c) in cfg.encoder.iter().enumerate() {
            encoder.push(Conv2d::new(params, rng, &format!("{name}/enc{i}"), ch, c, 3, 2, Padding::Same));
            ch = c;
        }
        // skip sources, coarse to fine: enc[levels-2] .. enc[0], then the input
        let mut skips: Vec<usize> = cfg.encoder[..levels - 1].iter().rev().copied().collect();
        skips.push(in_channels);

        let logit = {
            let s = ((cfg.init_inverse_depth - D_MIN) / (D_MAX - D_MIN)).clamp(1e-6, 1.0 - 1e-6);
            (s / (1.0 - s)).ln()
        };
        let (mut branches, mut iconvs, mut heads) = (Vec::new(), Vec::new(), Vec::new());
        for level in 0..levels {
            let mut branch = Vec::new();
            let mut bc = ch;
            for (j, &w) in cfg.branch.iter().chain(std::iter::once(&4)).enumerate() {
                branch.push(Conv2d::new(params, rng, &format!("{name}/up{level}/conv{j}"), bc, w, 3, 1, Padding::Same));
                bc = w;
            }
            branches.push(branch);
            let out = cfg.decoder[level];
            iconvs.push(Conv2d::new(params, rng, &format!("{name}/iconv{level}"), 1 + skips[level], out, 3, 1, Padding::Same));
            ch = out;
            if level >= levels - scales {
                let head = Conv2d::new(params, rng, &format!("{name}/disp{level}"), out, 2, 3, 1, Padding::Same);
                params.insert(&head.bias, &Tensor::full(&[1, 2, 1, 1], T::from_f64_lossy(logit)));
                heads.push(head);
            }
        }
        Ok(DepthNet {
            encoder,
            branches,
            iconvs,
            heads,
            in_channels,
            scales,
        })
    }

    /// `input` is `concat(left, right, R0)` along channels.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, input: &Tensor<T>) -> Result<DepthPyramid<T>> {
        let levels = self.encoder.len();
        let factor = 1usize << levels;
        if input.ndim() != 4 || input.dim(2) % factor != 0 || input.dim(3) % factor != 0 {
            return Err(Error::config(format!("depth net: input {:?} must have H and W divisible by {factor}", input.shape())));
        }
        let mut feats = vec![input.clone()];
        for conv in &self.encoder {
            let x = conv.forward(p, feats.last().expect("non-empty"))?.relu();
            feats.push(x);
        }
        let mut x = feats.pop().expect("encoder output");
        let mut left = Vec::new();
        let mut right = Vec::new();
        let first_head = levels - self.scales;
        for level in 0..levels {
            let mut u = x.clone();
            let last = self.branches[level].len() - 1;
            for (j, conv) in self.branches[level].iter().enumerate() {
                u = conv.forward(p, &u)?;
                if j < last {
                    u = u.relu();
                }
            }
            let u = u.pixel_shuffle(2)?;
            let skip = feats.pop().expect("one skip per level");
            x = self.iconvs[level].forward(p, &Tensor::concat(&[&u, &skip], 1)?)?.relu();
            if level >= first_head {
                let d = self.heads[level - first_head].forward(p, &x)?.sigmoid().mul_scalar(D_MAX - D_MIN).add_scalar(D_MIN);
                left.push(d.slice(1, 0, 1)?);
                right.push(d.slice(1, 1, 1)?);
            }
        }
        left.reverse();
        right.reverse();
        Ok(DepthPyramid { left, right })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseNetConfig {
    /// 3×3 convolutions; every other one (starting with the first) has
    /// stride 2.
    pub channels: Vec<usize>,
    pub head_hidden: usize,
    /// Multiplier on the rotation head output.
    pub r_scale: f64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            channels: vec![16, 32, 64, 128, 256, 256, 256],
            head_hidden: 128,
            r_scale: 0.01,
        }
    }
}

/// Convolutional trunk with separate translation and rotation heads. The
/// output layers of both heads start at zero, so an untrained network
/// predicts no motion.
#[derive(Debug, Clone)]
pub struct PoseNet {
    trunk: Vec<Conv2d>,
    t_head: [Linear; 2],
    r_head: [Linear; 2],
    pub in_channels: usize,
    pub r_scale: f64,
}

impl PoseNet {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, rng: &mut Rng, name: &str, in_channels: usize, cfg: &PoseNetConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.head_hidden == 0 {
            return Err(Error::config("pose net needs at least one convolution and a non-empty head"));
        }
        let mut trunk = Vec::new();
        let mut ch = in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let stride = if i % 2 == 0 { 2 } else { 1 };
            trunk.push(Conv2d::new(params, rng, &format!("{name}/conv{i}"), ch, c, 3, stride, Padding::Same));
            ch = c;
        }
        let hidden = cfg.head_hidden;
        let t_head = [
            Linear::new(params, rng, &format!("{name}/trans_fc0"), ch, hidden, false),
            Linear::new(params, rng, &format!("{name}/trans_fc1"), hidden, 3, true),
        ];
        let r_head = [
            Linear::new(params, rng, &format!("{name}/rot_fc0"), ch, hidden, false),
            Linear::new(params, rng, &format!("{name}/rot_fc1"), hidden, 3, true),
        ];
        Ok(PoseNet {
            trunk,
            t_head,
            r_head,
            in_channels,
            r_scale: cfg.r_scale,
        })
    }

    /// `input` is `concat(previous, current, R0)`; returns `[B, 6]` poses as
    /// `(t_x, t_y, t_z, r_x, r_y, r_z)`.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for conv in &self.trunk {
            x = conv.forward(p, &x)?.relu();
        }
        let feat = global_avg_pool(&x)?;
        let t = self.t_head[1].forward(p, &self.t_head[0].forward(p, &feat)?.relu())?;
        let r = self.r_head[1].forward(p, &self.r_head[0].forward(p, &feat)?.relu())?.mul_scalar(self.r_scale);
        Ok(Tensor::concat(&[&t, &r], 1)?)
    }
}

/// Smallest spatial extent the critic accepts.
pub const CRITIC_MIN_SIZE: usize = 16;

/// Wasserstein critic: four 5×5 stride-2 convolutions with SELU, then a
/// 4×4 stride-1 valid convolution to one channel, averaged per sample. No
/// normalization layers.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    last: Conv2d,
    pub in_channels: usize,
}

impl Discriminator {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 128];

    pub fn new<T: Scalar>(params: &mut ParamSet<T>, rng: &mut Rng, name: &str, in_channels: usize) -> Self {
        let mut convs = Vec::new();
        let mut ch = in_channels;
        for (i, &c) in Self::WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(params, rng, &format!("{name}/conv{i}"), ch, c, 5, 2, Padding::Same));
            ch = c;
        }
        let last = Conv2d::new(params, rng, &format!("{name}/conv4"), ch, 1, 4, 1, Padding::Valid);
        Discriminator { convs, last, in_channels }
    }

    /// Number of layers with learnable parameters, and whether any of them
    /// normalizes (always false; kept for structural assertions).
    pub fn structure(&self) -> (usize, bool) {
        (self.convs.len() + 1, false)
    }

    /// Final single-channel map before averaging. Maps that shrink below the
    /// 4×4 footprint of the last layer are zero-padded at the bottom/right up
    /// to it.
    pub fn feature_map<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.dim(2) < CRITIC_MIN_SIZE || x.dim(3) < CRITIC_MIN_SIZE {
            return Err(Error::config(format!(
                "critic input {:?} is smaller than {CRITIC_MIN_SIZE} in a spatial dimension",
                x.shape()
            )));
        }
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(p, &h)?.selu();
        }
        let k = self.last.kernel;
        let padding = if h.dim(2) < k || h.dim(3) < k {
            Padding::Explicit {
                top: 0,
                bottom: k.saturating_sub(h.dim(2)),
                left: 0,
                right: k.saturating_sub(h.dim(3)),
            }
        } else {
            Padding::Valid
        };
        self.last.forward_padded(p, &h, padding)
    }

    /// Critic value per sample, shape `[B]`.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let map = self.feature_map(p, x)?;
        let (b, hw) = (map.dim(0), map.dim(2) * map.dim(3));
        Ok(map.sum_to(&[b, 1, 1, 1])?.mul_scalar(1.0 / hw as f64).reshape(&[b])?)
    }

    pub fn last_weight_name(&self) -> &str {
        &self.last.weight
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_all<T: Scalar>(p: &ParamSet<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in p.iter() {
            out.insert(n, &t.zeros_like());
        }
        out
    }

    #[test]
    fn lstm_zero_weights_zero_state() {
        let mut p = ParamSet::<f64>::new();
        let mut rng = Rng::new(1);
        let cell = ConvLstmCell::new(&mut p, &mut rng, "layer0/lstm", 6, 8);
        let p = zero_all(&p);
        let s = cell.step(&p, &Tensor::zeros(&[1, 6, 4, 4]), &LstmState::zeros(1, 8, 4, 4)).unwrap();
        assert!(s.h.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_scales_and_range() {
        let mut p = ParamSet::<f64>::new();
        let mut rng = Rng::new(2);
        let net = DepthNet::new(&mut p, &mut rng, "layer0/depth", 14, 4, &DepthNetConfig::default()).unwrap();
        let x = rng.uniform_tensor(&[1, 14, 32, 64], -1.0, 1.0);
        let out = net.forward(&p, &x).unwrap();
        let sizes: Vec<_> = out.left.iter().map(|t| (t.dim(3), t.dim(2))).collect();
        assert_eq!(sizes, vec![(64, 32), (32, 16), (16, 8), (8, 4)]);
        for t in out.left.iter().chain(&out.right) {
            assert!(t.to_vec().iter().all(|&v| v >= D_MIN && v <= D_MAX));
        }
    }

    #[test]
    fn pose_zero_heads_give_zero_motion() {
        let mut p = ParamSet::<f64>::new();
        let mut rng = Rng::new(3);
        let net = PoseNet::new(&mut p, &mut rng, "layer0/pose", 14, &PoseNetConfig::default()).unwrap();
        let x = rng.uniform_tensor(&[2, 14, 32, 64], -1.0, 1.0);
        let pose = net.forward(&p, &x).unwrap();
        assert_eq!(pose.shape(), &[2, 6]);
        assert!(pose.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_map_at_full_resolution() {
        let mut p = ParamSet::<f32>::new();
        let mut rng = Rng::new(4);
        let d = Discriminator::new(&mut p, &mut rng, "layer0/disc", 3);
        let x = Tensor::<f32>::zeros(&[1, 3, 416, 128]);
        assert_eq!(d.feature_map(&p, &x).unwrap().shape(), &[1, 1, 23, 5]);
    }

    #[test]
    fn critic_small_inputs() {
        let mut p = ParamSet::<f64>::new();
        let mut rng = Rng::new(5);
        let d = Discriminator::new(&mut p, &mut rng, "layer0/disc", 3);
        assert_eq!(d.feature_map(&p, &Tensor::zeros(&[1, 3, 32, 64])).unwrap().shape(), &[1, 1, 1, 1]);
        assert!(d.forward(&p, &Tensor::zeros(&[1, 3, 8, 64])).is_err());
    }

    #[test]
    fn critic_zero_and_linear_in_last_layer() {
        let mut p = ParamSet::<f64>::new();
        let mut rng = Rng::new(6);
        let d = Discriminator::new(&mut p, &mut rng, "layer0/disc", 3);
        let x = rng.uniform_tensor::<f64>(&[2, 3, 32, 32], 0.0, 1.0);
        assert!(d.forward(&zero_all(&p), &x).unwrap().to_vec().iter().all(|&v| v == 0.0));
        let base = d.forward(&p, &x).unwrap().to_vec();
        let mut scaled = p.clone();
        let w = p.get(d.last_weight_name()).unwrap().mul_scalar(3.0);
        scaled.insert(d.last_weight_name(), &w);
        let s = d.forward(&scaled, &x).unwrap().to_vec();
        for (a, b) in base.iter().zip(&s) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }
}
