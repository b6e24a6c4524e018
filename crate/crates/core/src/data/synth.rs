//! Textured-plane scenes rendered by ray casting, with exact depth and
//! camera poses.
//!
//! Saved layout of a scene directory:
//!
//! ```text
//! manifest.txt        key = value: frames, width, height, sequence
//! calib.txt           fx, fy, cx, cy, baseline, width, height
//! poses.txt           one camera-to-world pose per frame, 12 values (row-major 3×4)
//! left_NNNN.png       8-bit RGB
//! right_NNNN.png      8-bit RGB
//! depth_NNNN.png      16-bit, metres × 256, 0 = invalid
//! ```

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sganvo_tensor::Rng;

use super::{DepthMap, Frame, Image, SequenceWindow};
use crate::error::{Error, Result};
use crate::geometry::{reproject, Calibration, Intrinsics, Pose6, Transform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    /// Principal point; the image centre when absent.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub baseline: f64,
    /// Plane `Z = depth + tilt_x·X + tilt_y·Y` in the first camera's frame.
    pub depth: f64,
    pub tilt_x: f64,
    pub tilt_y: f64,
    /// Motion of each camera relative to the previous one (camera k+1 in
    /// camera k coordinates); `frames = motions.len() + 1`.
    pub motions: Vec<[f64; 6]>,
    pub texture_seed: u64,
    /// Sinusoids per colour channel.
    pub components: usize,
    /// Wavelength range in pixels of the first camera at the plane's depth.
    pub min_wavelength: f64,
    pub max_wavelength: f64,
    /// Sum of sinusoid amplitudes per channel (values stay within 0.5 ± it).
    pub amplitude: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            width: 64,
            height: 32,
            fx: 60.0,
            fy: 60.0,
            cx: None,
            cy: None,
            baseline: 0.5,
            depth: 3.0,
            tilt_x: 0.15,
            tilt_y: 0.0,
            motions: vec![[0.2, 0.0, 0.1, 0.0, 0.0, 0.0], [0.3, 0.0, 0.1, 0.0, 0.01, 0.0]],
            texture_seed: 7,
            components: 4,
            min_wavelength: 24.0,
            max_wavelength: 64.0,
            amplitude: 0.4,
        }
    }
}

/// Fraction of target pixels that must stay in view between frames.
pub const MIN_IN_VIEW: f64 = 0.8;

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Band-limited random texture on plane coordinates.
struct Texture {
    channels: [Vec<Wave>; 3],
}

impl Texture {
    fn new(spec: &SynthSceneSpec) -> Self {
        let mut rng = Rng::with_stream(spec.texture_seed, 2);
        let mut channel = || {
            let waves: Vec<(f64, f64, f64, f64)> = (0..spec.components)
                .map(|_| {
                    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                    let lambda = rng.uniform_range(spec.min_wavelength, spec.max_wavelength);
                    (theta, lambda, rng.uniform_range(0.0, std::f64::consts::TAU), rng.uniform_range(0.5, 1.0))
                })
                .collect();
            let total: f64 = waves.iter().map(|w| w.3).sum();
            waves
                .into_iter()
                .map(|(theta, lambda, phase, a)| {
                    let k = std::f64::consts::TAU / lambda;
                    Wave {
                        kx: k * theta.cos(),
                        ky: k * theta.sin(),
                        phase,
                        amp: spec.amplitude * a / total.max(1e-12),
                    }
                })
                .collect()
        };
        Texture {
            channels: [channel(), channel(), channel()],
        }
    }

    fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        0.5 + self.channels[c].iter().map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin()).sum::<f64>()
    }
}

/// A rendered scene: a window over all frames plus per-frame inverse depth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub window: SequenceWindow,
    /// Dense inverse depth of each left frame, row-major `H × W`.
    pub inverse_depth: Vec<Vec<f64>>,
    /// Motion from frame k+1 to frame k, as fed to the warp.
    pub relative: Vec<Pose6>,
}

impl SynthSceneSpec {
    /// The same scene rendered at `width × height`: focal lengths,
    /// principal point and texture wavelengths scale with the image.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let (sx, sy) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        SynthSceneSpec {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx.map(|c| c * sx),
            cy: self.cy.map(|c| c * sy),
            min_wavelength: self.min_wavelength * sx,
            max_wavelength: self.max_wavelength * sx,
            ..self.clone()
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.fx,
            self.fy,
            self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0),
            self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0),
            self.width,
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.width == 0 || self.height == 0 {
            errs.push("synth.width/height must be positive".to_string());
        }
        if !(self.depth > 0.0) {
            errs.push(format!("synth.depth = {} must be positive", self.depth));
        }
        if !(self.baseline > 0.0) {
            errs.push(format!("synth.baseline = {} must be positive", self.baseline));
        }
        if !(self.min_wavelength > 2.0 && self.max_wavelength >= self.min_wavelength) {
            errs.push("synth wavelengths must satisfy 2 < min_wavelength <= max_wavelength".to_string());
        }
        if !(0.0..=0.5).contains(&self.amplitude) {
            errs.push(format!("synth.amplitude = {} must be in [0, 0.5]", self.amplitude));
        }
        if self.motions.iter().flatten().any(|v| !v.is_finite()) {
            errs.push("synth.motions must be finite".to_string());
        }
        if let Err(e) = self.intrinsics() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Renders `spec`. Fails when the plane is behind a camera or a motion
/// leaves fewer than [`MIN_IN_VIEW`] of the pixels in view.
pub fn generate_synth(spec: &SynthSceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let calib = Calibration {
        intrinsics: k,
        baseline: spec.baseline,
    };
    let texture = Texture::new(spec);
    let relative: Vec<Pose6> = spec.motions.iter().map(|m| Pose6::from_slice(m)).collect();
    let mut poses = vec![Transform::identity()];
    for m in &relative {
        let last = *poses.last().expect("non-empty");
        poses.push(last.compose(&m.to_transform()));
    }
    let normal = Vector3::new(-spec.tilt_x, -spec.tilt_y, 1.0);
    let tex_scale = spec.fx / spec.depth;

    let render = |cam: &Transform| -> Result<(Image, Vec<f64>)> {
        let mut img = Image::new(spec.width, spec.height);
        let mut inv = vec![0.0; spec.width * spec.height];
        let origin = cam.translation();
        let rot = cam.rotation();
        for v in 0..spec.height {
            for u in 0..spec.width {
                let dir = rot * k.back_project(u as f64, v as f64, 1.0);
                let s = (spec.depth - normal.dot(&origin)) / normal.dot(&dir);
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::config(format!("plane is not in front of the camera at pixel ({u}, {v})")));
                }
                let p = origin + dir * s;
                for c in 0..3 {
                    img.set(c, v, u, texture.sample(c, p.x * tex_scale, p.y * tex_scale) as f32);
                }
                inv[v * spec.width + u] = 1.0 / s;
            }
        }
        Ok((img, inv))
    };

    let mut frames = Vec::new();
    let mut inverse_depth = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let (left, inv) = render(pose)?;
        let right_cam = pose.compose(&Transform::translation_only([spec.baseline, 0.0, 0.0]));
        let (right, _) = render(&right_cam)?;
        let depth = DepthMap {
            width: spec.width,
            height: spec.height,
            data: inv.iter().map(|d| 1.0 / d).collect(),
        };
        frames.push(Frame {
            left,
            right: Some(right),
            calib,
            index: i,
            gt_pose: Some(*pose),
            gt_depth: Some(depth),
        });
        inverse_depth.push(inv);
    }

    for (step, m) in relative.iter().enumerate() {
        let t = m.to_transform();
        let inv = &inverse_depth[step + 1];
        let (wmax, hmax) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
        let mut inside = 0usize;
        for v in 0..spec.height {
            for u in 0..spec.width {
                if let Some((x, y)) = reproject(u as f64, v as f64, inv[v * spec.width + u], &k, &t) {
                    if (0.0..=wmax).contains(&x) && (0.0..=hmax).contains(&y) {
                        inside += 1;
                    }
                }
            }
        }
        let frac = inside as f64 / (spec.width * spec.height) as f64;
        if frac < MIN_IN_VIEW {
            return Err(Error::config(format!(
                "motion {} keeps only {:.0}% of pixels in view (need {:.0}%)",
                step + 1,
                100.0 * frac,
                100.0 * MIN_IN_VIEW
            )));
        }
    }

    Ok(SynthScene {
        window: SequenceWindow {
            frames,
            sequence: "synth".into(),
            start: 0,
        },
        inverse_depth,
        relative,
    })
}

fn name(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i:04}.png")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a rendered scene in the documented directory layout.
pub fn save_scene(scene: &SynthScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let w = &scene.window;
    let first = &w.frames[0];
    write(
        &dir.join("manifest.txt"),
        &format!(
            "frames = {}\nwidth = {}\nheight = {}\nsequence = {}\n",
            w.len(),
            first.left.width,
            first.left.height,
            w.sequence
        ),
    )?;
    write(&dir.join("calib.txt"), &first.calib.to_string())?;
    let mut poses = String::new();
    for (i, f) in w.frames.iter().enumerate() {
        f.left.save(&dir.join(name("left", i)))?;
        if let Some(r) = &f.right {
            r.save(&dir.join(name("right", i)))?;
        }
        if let Some(d) = &f.gt_depth {
            d.save_png(&dir.join(name("depth", i)))?;
        }
        let row = f.gt_pose.unwrap_or_default().to_row12();
        poses.push_str(&row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" "));
        poses.push('\n');
    }
    write(&dir.join("poses.txt"), &poses)
}

/// Reads a scene directory back as frames (without the dense inverse depth,
/// which 16-bit storage quantizes).
pub fn load_scene(dir: &Path) -> Result<Vec<Frame>> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let frames: usize = manifest
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "frames")
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or_else(|| Error::data(format!("{}: missing `frames`", manifest_path.display())))?;
    let calib = Calibration::load(&dir.join("calib.txt"))?;
    let poses = super::kitti::read_poses(&dir.join("poses.txt"))?;
    if poses.len() != frames {
        return Err(Error::data(format!("{}: {} poses for {} frames", dir.display(), poses.len(), frames)));
    }
    (0..frames)
        .map(|i| {
            let right = dir.join(name("right", i));
            let depth = dir.join(name("depth", i));
            Ok(Frame {
                left: Image::load(&dir.join(name("left", i)))?,
                right: if right.exists() { Some(Image::load(&right)?) } else { None },
                calib,
                index: i,
                gt_pose: Some(poses[i]),
                gt_depth: if depth.exists() { Some(DepthMap::load_png(&depth)?) } else { None },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_motion_frames_identical() {
        let spec = SynthSceneSpec {
            motions: vec![[0.0; 6]; 2],
            ..Default::default()
        };
        let s = generate_synth(&spec).unwrap();
        assert_eq!(s.window.frames[0].left, s.window.frames[2].left);
    }

    #[test]
    fn lateral_shift_matches_pinhole() {
        let spec = SynthSceneSpec {
            width: 128,
            height: 32,
            fx: 100.0,
            fy: 100.0,
            depth: 2.0,
            tilt_x: 0.0,
            motions: vec![[0.2, 0.0, 0.0, 0.0, 0.0, 0.0]],
            ..Default::default()
        };
        let s = generate_synth(&spec).unwrap();
        let (a, b) = (&s.window.frames[0].left, &s.window.frames[1].left);
        // camera moves +x, so the scene moves 10 px to the left
        for y in 0..32 {
            for x in 0..100 {
                assert!((b.get(0, y, x) - a.get(0, y, x + 10)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_motion_out_of_view() {
        let spec = SynthSceneSpec {
            motions: vec![[2.0, 0.0, 0.0, 0.0, 0.0, 0.0]],
            ..Default::default()
        };
        assert!(generate_synth(&spec).unwrap_err().to_string().contains("in view"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synth(&SynthSceneSpec::default()).unwrap();
        save_scene(&s, dir.path()).unwrap();
        let frames = load_scene(dir.path()).unwrap();
        assert_eq!(frames.len(), 3);
        let gt = s.window.frames[2].gt_pose.unwrap().to_row12();
        let back = frames[2].gt_pose.unwrap().to_row12();
        assert!(gt.iter().zip(back).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(frames[1].calib, s.window.frames[1].calib);
    }
}
