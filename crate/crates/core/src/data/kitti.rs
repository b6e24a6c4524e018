//! Readers for the public KITTI layouts. Inputs are assumed rectified.
//!
//! Raw recordings:
//!
//! ```text
//! <root>/<date>/calib_cam_to_cam.txt      P_rect_02, P_rect_03, R_rect_00, S_rect_02
//! <root>/<date>/calib_velo_to_cam.txt     R, T
//! <root>/<date>/<drive>/image_02/data/NNNNNNNNNN.png
//! <root>/<date>/<drive>/image_03/data/NNNNNNNNNN.png
//! <root>/<date>/<drive>/velodyne_points/data/NNNNNNNNNN.bin
//! ```
//!
//! A drive is named `<date>/<drive>` (for example
//! `2011_09_26/2011_09_26_drive_0002_sync`), as in the Eigen split files.
//!
//! Odometry benchmark:
//!
//! ```text
//! <root>/sequences/<id>/calib.txt         P2, P3
//! <root>/sequences/<id>/image_2/NNNNNN.png
//! <root>/sequences/<id>/image_3/NNNNNN.png
//! <root>/poses/<id>.txt                   12 values per frame
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use super::{sliding_windows, DepthMap, Frame, Image, SequenceWindow, WindowSource};
use crate::error::{Error, Result};
use crate::geometry::{Calibration, Intrinsics, Transform};

/// Standard laser-depth cap in metres.
pub const DEPTH_CAP: f64 = 80.0;

/// `key: v v v ...` calibration files.
fn read_kv(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(':') {
            let nums: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse).collect();
            if let Ok(nums) = nums {
                out.insert(k.trim().to_string(), nums);
            }
        }
    }
    Ok(out)
}

fn need<'a>(kv: &'a HashMap<String, Vec<f64>>, key: &str, len: usize, path: &Path) -> Result<&'a [f64]> {
    match kv.get(key) {
        Some(v) if v.len() == len => Ok(v),
        Some(v) => Err(Error::data(format!("{}: `{key}` has {} values, expected {len}", path.display(), v.len()))),
        None => Err(Error::data(format!("{}: missing `{key}`", path.display()))),
    }
}

/// Calibration from the left and right rectified projection matrices.
fn calib_from_projections(p2: &[f64], p3: &[f64], width: usize, height: usize) -> Result<Calibration> {
    let fx = p2[0];
    let intrinsics = Intrinsics::new(fx, p2[5], p2[2], p2[6], width, height)?;
    // P[0][3] = −fx·(camera x offset)
    let baseline = (p2[3] - p3[3]) / fx;
    if !(baseline > 0.0) {
        return Err(Error::data(format!("stereo baseline {baseline} is not positive")));
    }
    Ok(Calibration { intrinsics, baseline })
}

/// Parses a pose file: one row-major 3×4 camera-to-world pose per line.
pub fn read_poses(path: &Path) -> Result<Vec<Transform>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let v: std::result::Result<Vec<f64>, _> = l.split_whitespace().map(str::parse).collect();
            let v = v.map_err(|_| Error::data(format!("{}: line {} is not numeric", path.display(), i + 1)))?;
            Transform::from_row12(&v).map_err(|e| Error::data(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok((w as usize, h as usize))
}

/// Frame files of one sequence, read on demand.
#[derive(Debug, Clone)]
struct FrameFiles {
    left: PathBuf,
    right: Option<PathBuf>,
    pose: Option<Transform>,
}

/// Windows over image files; images are decoded and resized when a window
/// is requested, so a corrupted frame only affects the windows holding it.
#[derive(Debug, Clone)]
pub struct LazyWindows {
    sequences: Vec<(String, Calibration, Vec<FrameFiles>)>,
    /// `(sequence, start)` of every window.
    index: Vec<(usize, usize)>,
    window: usize,
    width: usize,
    height: usize,
}

impl LazyWindows {
    fn new(window: usize, width: usize, height: usize) -> Self {
        LazyWindows {
            sequences: Vec::new(),
            index: Vec::new(),
            window,
            width,
            height,
        }
    }

    fn push(&mut self, name: String, calib: Calibration, files: Vec<FrameFiles>) {
        let s = self.sequences.len();
        if files.len() >= self.window {
            self.index.extend((0..=files.len() - self.window).map(|start| (s, start)));
        }
        self.sequences.push((name, calib, files));
    }

    /// Every frame of sequence `s`, resized; used by evaluation.
    pub fn sequence_frames(&self, s: usize) -> Result<Vec<Frame>> {
        let (_, calib, files) = &self.sequences[s];
        (0..files.len()).map(|i| self.frame(calib, files, i)).collect()
    }

    pub fn sequence_count(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequence_poses(&self, s: usize) -> Option<Vec<Transform>> {
        self.sequences[s].2.iter().map(|f| f.pose).collect()
    }

    fn frame(&self, calib: &Calibration, files: &[FrameFiles], i: usize) -> Result<Frame> {
        let f = &files[i];
        let left = Image::load(&f.left)?;
        if left.width != calib.intrinsics.width || left.height != calib.intrinsics.height {
            return Err(Error::data(format!(
                "{}: {}x{} image does not match the calibrated {}x{}",
                f.left.display(),
                left.width,
                left.height,
                calib.intrinsics.width,
                calib.intrinsics.height
            )));
        }
        let right = match &f.right {
            Some(p) if p.exists() => Some(Image::load(p)?),
            _ => None,
        };
        let frame = Frame {
            left,
            right,
            calib: *calib,
            index: i,
            gt_pose: f.pose,
            gt_depth: None,
        };
        Ok(frame.resized(self.width, self.height))
    }
}

impl WindowSource for LazyWindows {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn window(&self, index: usize) -> Result<SequenceWindow> {
        let &(s, start) = self.index.get(index).ok_or_else(|| Error::data(format!("window {index} out of range")))?;
        let (name, calib, files) = &self.sequences[s];
        let frames = (start..start + self.window).map(|i| self.frame(calib, files, i)).collect::<Result<Vec<_>>>()?;
        Ok(SequenceWindow {
            frames,
            sequence: name.clone(),
            start,
        })
    }
}

/// Raw-recording calibration: stereo intrinsics and the laser-to-camera
/// projection of the left colour camera.
#[derive(Debug, Clone)]
pub struct RawCalib {
    pub calib: Calibration,
    /// Projects homogeneous laser points to homogeneous left-image pixels.
    pub velo_to_image: Matrix3x4<f64>,
}

pub fn read_raw_calib(date_dir: &Path) -> Result<RawCalib> {
    let cam_path = date_dir.join("calib_cam_to_cam.txt");
    let cam = read_kv(&cam_path)?;
    let p2 = need(&cam, "P_rect_02", 12, &cam_path)?;
    let p3 = need(&cam, "P_rect_03", 12, &cam_path)?;
    let size = need(&cam, "S_rect_02", 2, &cam_path)?;
    let calib = calib_from_projections(p2, p3, size[0] as usize, size[1] as usize)?;
    let rr = need(&cam, "R_rect_00", 9, &cam_path)?;

    let velo_path = date_dir.join("calib_velo_to_cam.txt");
    let velo = read_kv(&velo_path)?;
    let r = need(&velo, "R", 9, &velo_path)?;
    let t = need(&velo, "T", 3, &velo_path)?;

    let p2m = Matrix3x4::from_row_slice(p2);
    let rect = Transform::from_parts(Matrix3::from_row_slice(rr), Vector3::zeros());
    let v2c = Transform::from_parts(Matrix3::from_row_slice(r), Vector3::from_row_slice(t));
    let velo_to_image = p2m * rect.compose(&v2c).0;
    Ok(RawCalib { calib, velo_to_image })
}

/// Projects a laser scan (`x y z reflectance` little-endian f32 records)
/// into a sparse depth map at the calibrated resolution, keeping the
/// nearest return per pixel and dropping points beyond `cap` metres.
pub fn velodyne_depth(bin: &Path, calib: &RawCalib, cap: f64) -> Result<DepthMap> {
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::data(format!("{}: size {} is not a multiple of 16", bin.display(), bytes.len())));
    }
    let (w, h) = (calib.calib.intrinsics.width, calib.calib.intrinsics.height);
    let mut depth = DepthMap::new(w, h);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
        let (x, y, z) = (f(0), f(1), f(2));
        if x < 0.0 {
            continue;
        }
        let p = calib.velo_to_image * Vector4::new(x, y, z, 1.0);
        let d = p.z;
        if !(d > 0.0) || d > cap {
            continue;
        }
        let (u, v) = ((p.x / d).round(), (p.y / d).round());
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let idx = v as usize * w + u as usize;
        if depth.data[idx] == 0.0 || d < depth.data[idx] {
            depth.data[idx] = d;
        }
    }
    Ok(depth)
}

/// The usual evaluation crop for the Eigen split, as
/// `(top, bottom, left, right)` pixel bounds (bottom/right exclusive).
pub fn eigen_crop(width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (h, w) = (height as f64, width as f64);
    (
        (0.408_108_11 * h) as usize,
        (0.991_891_89 * h) as usize,
        (0.035_947_71 * w) as usize,
        (0.964_052_29 * w) as usize,
    )
}

/// Reads an Eigen-style split file: `<date>/<drive> <frame> [l|r]` per line.
pub fn read_split(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let drive = it.next().unwrap_or_default().to_string();
            let frame = it
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::data(format!("{}: bad split line `{l}`", path.display())))?;
            Ok((drive, frame))
        })
        .collect()
}

fn check_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::data(format!("dataset directory {} does not exist", path.display())))
    }
}

/// Sliding windows of `window` frames over each listed raw drive, resized to
/// `width × height`. Drives without `image_03` produce monocular windows.
pub fn load_kitti_raw(root: &Path, drives: &[String], window: usize, width: usize, height: usize) -> Result<LazyWindows> {
    check_dir(root)?;
    let mut out = LazyWindows::new(window, width, height);
    for drive in drives {
        let dir = root.join(drive);
        check_dir(&dir)?;
        let date_dir = dir.parent().ok_or_else(|| Error::data(format!("drive `{drive}` must be <date>/<drive>")))?;
        let calib = read_raw_calib(date_dir)?.calib;
        let lefts = sorted_pngs(&dir.join("image_02/data"))?;
        let right_dir = dir.join("image_03/data");
        let files = lefts
            .into_iter()
            .map(|left| FrameFiles {
                right: Some(right_dir.join(left.file_name().expect("file"))),
                left,
                pose: None,
            })
            .collect();
        out.push(drive.clone(), calib, files);
    }
    Ok(out)
}

/// Evaluation frame of a raw drive: resized left image plus full-resolution
/// laser depth.
pub fn raw_eval_frame(root: &Path, drive: &str, frame: usize, width: usize, height: usize, cap: f64) -> Result<(Image, DepthMap, RawCalib)> {
    let dir = root.join(drive);
    let date_dir = dir.parent().ok_or_else(|| Error::data(format!("drive `{drive}` must be <date>/<drive>")))?;
    let calib = read_raw_calib(date_dir)?;
    let img = Image::load(&dir.join(format!("image_02/data/{frame:010}.png")))?;
    let depth = velodyne_depth(&dir.join(format!("velodyne_points/data/{frame:010}.bin")), &calib, cap)?;
    Ok((img.resized(width, height), depth, calib))
}

/// Odometry-benchmark sequences with ground-truth poses when available.
pub fn load_kitti_odometry(root: &Path, sequences: &[String], window: usize, width: usize, height: usize) -> Result<LazyWindows> {
    check_dir(root)?;
    let mut out = LazyWindows::new(window, width, height);
    for seq in sequences {
        let dir = root.join("sequences").join(seq);
        check_dir(&dir)?;
        let calib_path = dir.join("calib.txt");
        let kv = read_kv(&calib_path)?;
        let lefts = sorted_pngs(&dir.join("image_2"))?;
        let first = lefts.first().ok_or_else(|| Error::data(format!("{}: no images", dir.display())))?;
        let (w, h) = image_size(first)?;
        let calib = calib_from_projections(need(&kv, "P2", 12, &calib_path)?, need(&kv, "P3", 12, &calib_path)?, w, h)?;
        let pose_path = root.join("poses").join(format!("{seq}.txt"));
        let poses = if pose_path.exists() {
            let poses = read_poses(&pose_path)?;
            if poses.len() != lefts.len() {
                return Err(Error::data(format!(
                    "sequence {seq}: {} poses but {} images",
                    poses.len(),
                    lefts.len()
                )));
            }
            poses.into_iter().map(Some).collect()
        } else {
            vec![None; lefts.len()]
        };
        let right_dir = dir.join("image_3");
        let files = lefts
            .into_iter()
            .zip(poses)
            .map(|(left, pose)| FrameFiles {
                right: Some(right_dir.join(left.file_name().expect("file"))),
                left,
                pose,
            })
            .collect();
        out.push(seq.clone(), calib, files);
    }
    Ok(out)
}

/// Sliding windows over in-memory frames; a frame that failed to load is
/// skipped together with every window containing it.
pub fn windows_skipping_failures(frames: Vec<Result<Frame>>, window: usize, sequence: &str) -> Vec<SequenceWindow> {
    let mut out = Vec::new();
    let mut run: Vec<Frame> = Vec::new();
    let mut flush = |run: &mut Vec<Frame>| {
        out.extend(sliding_windows(run, window, sequence));
        run.clear();
    };
    for f in frames {
        match f {
            Ok(f) => run.push(f),
            Err(e) => {
                log::warn!("{sequence}: skipping frame: {e}");
                flush(&mut run);
            }
        }
    }
    flush(&mut run);
    out
}
