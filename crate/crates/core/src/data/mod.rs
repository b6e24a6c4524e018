//! Frames, windows and their sources: a synthetic plane renderer with exact
//! ground truth, and readers for the KITTI raw and odometry layouts.

mod image;
pub mod kitti;
pub mod synth;

pub use self::image::{DepthMap, Image, DEPTH_PNG_SCALE};

use serde::{Deserialize, Serialize};
use sganvo_tensor::{Rng, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{Calibration, Transform};
use crate::model::WindowBatch;

#[derive(Debug, Clone)]
pub struct Frame {
    pub left: Image,
    /// Absent for monocular sources; training then reuses the left image.
    pub right: Option<Image>,
    pub calib: Calibration,
    pub index: usize,
    /// Camera-to-world pose.
    pub gt_pose: Option<Transform>,
    pub gt_depth: Option<DepthMap>,
}

impl Frame {
    /// Resizes the images and rescales the intrinsics with them.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        Frame {
            left: self.left.resized(width, height),
            right: self.right.as_ref().map(|r| r.resized(width, height)),
            calib: self.calib.resized(width, height),
            index: self.index,
            gt_pose: self.gt_pose,
            gt_depth: self.gt_depth.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceWindow {
    pub frames: Vec<Frame>,
    pub sequence: String,
    pub start: usize,
}

impl SequenceWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_stereo(&self) -> bool {
        self.frames.iter().all(|f| f.right.is_some())
    }

    /// Ground-truth motion from frame `k+1` to frame `k` for every
    /// consecutive pair, when poses are known.
    pub fn gt_relative(&self) -> Option<Vec<Transform>> {
        let poses: Option<Vec<Transform>> = self.frames.iter().map(|f| f.gt_pose).collect();
        let poses = poses?;
        Some(poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect())
    }
}

/// Indexable collection of windows, possibly read lazily from disk.
pub trait WindowSource {
    fn len(&self) -> usize;
    fn window(&self, index: usize) -> Result<SequenceWindow>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WindowSource for Vec<SequenceWindow> {
    fn len(&self) -> usize {
        <[SequenceWindow]>::len(self)
    }

    fn window(&self, index: usize) -> Result<SequenceWindow> {
        self.get(index).cloned().ok_or_else(|| Error::data(format!("window {index} out of range")))
    }
}

/// Sliding windows of `n` frames with stride 1 over `frames`.
pub fn sliding_windows(frames: &[Frame], n: usize, sequence: &str) -> Vec<SequenceWindow> {
    if n == 0 || frames.len() < n {
        return Vec::new();
    }
    (0..=frames.len() - n)
        .map(|s| SequenceWindow {
            frames: frames[s..s + n].to_vec(),
            sequence: sequence.to_string(),
            start: s,
        })
        .collect()
}

/// Stacks windows along the batch axis. All windows must share the
/// calibration and frame count.
pub fn to_batch<T: Scalar>(windows: &[SequenceWindow]) -> Result<WindowBatch<T>> {
    let first = windows.first().ok_or_else(|| Error::data("empty batch"))?;
    let n = first.len();
    let calib = first.frames[0].calib;
    for w in windows {
        if w.len() != n {
            return Err(Error::data(format!("windows of {} and {} frames in one batch", n, w.len())));
        }
        if w.frames.iter().any(|f| f.calib != calib) {
            return Err(Error::data(format!("window {}:{} changes calibration within the batch", w.sequence, w.start)));
        }
    }
    let stack = |pick: &dyn Fn(&Frame) -> &Image, t: usize| -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = windows.iter().map(|w| pick(&w.frames[t]).to_tensor()).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    };
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for t in 0..n {
        left.push(stack(&|f| &f.left, t)?);
        right.push(stack(&|f| f.right.as_ref().unwrap_or(&f.left), t)?);
    }
    Ok(WindowBatch {
        left,
        right,
        intrinsics: calib.intrinsics,
    })
}

/// Optional training-time augmentation, off by default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Maximum relative brightness change per window (0 disables).
    pub color_jitter: f64,
    /// Probability of mirroring a stereo window and swapping its cameras.
    pub lr_swap: f64,
}

impl Augment {
    pub fn is_off(&self) -> bool {
        self.color_jitter == 0.0 && self.lr_swap == 0.0
    }

    pub fn apply(&self, w: &SequenceWindow, rng: &mut Rng) -> SequenceWindow {
        let mut out = w.clone();
        if self.color_jitter > 0.0 {
            let gain = 1.0 + rng.uniform_range(-self.color_jitter, self.color_jitter) as f32;
            for f in &mut out.frames {
                for img in std::iter::once(&mut f.left).chain(f.right.as_mut()) {
                    img.data.iter_mut().for_each(|v| *v = (*v * gain).clamp(0.0, 1.0));
                }
            }
        }
        if self.lr_swap > 0.0 && w.is_stereo() && rng.uniform() < self.lr_swap {
            // the mirrored right image is a left view of the mirrored scene
            for f in &mut out.frames {
                let right = f.right.take().expect("stereo window");
                f.right = Some(f.left.flipped());
                f.left = right.flipped();
                let k = &mut f.calib.intrinsics;
                k.cx = (k.width - 1) as f64 - k.cx;
                f.gt_pose = None;
                f.gt_depth = None;
            }
        }
        out
    }
}
