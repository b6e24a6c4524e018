//! Pinhole camera, rigid transforms and differentiable inverse warping.
//!
//! Pixel coordinates are `(u, v)` = (column, row) with integer values at
//! pixel centres. A relative pose `T` maps points expressed in the target
//! camera (frame t) into the source camera (frame t−1): `p_src = R·p_tgt + t`,
//! with `R = Rz(r_z)·Ry(r_y)·Rx(r_x)`.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use sganvo_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Smallest inverse depth (1000 m).
pub const D_MIN: f64 = 1e-3;
/// Largest inverse depth (0.1 m).
pub const D_MAX: f64 = 10.0;
/// Points closer than this after transformation are treated as behind the
/// camera.
pub const Z_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::config(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera after resizing the image to
    /// `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }
}

/// 6-DoF motion: translation in metres, XYZ Euler angles in radians.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Pose6 {
    pub t: [f64; 3],
    pub r: [f64; 3],
}

impl Pose6 {
    pub fn new(t: [f64; 3], r: [f64; 3]) -> Self {
        Pose6 { t, r }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.t;
        let [d, e, f] = self.r;
        [a, b, c, d, e, f]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Pose6 {
            t: [v[0], v[1], v[2]],
            r: [v[3], v[4], v[5]],
        }
    }

    pub fn to_transform(&self) -> Transform {
        Transform::from_parts(euler_rotation(self.r), Vector3::from(self.t))
    }

    /// Euler decomposition of `t`; exact inverse of [`Pose6::to_transform`]
    /// while `|r_y| < π/2`.
    pub fn from_transform(t: &Transform) -> Self {
        let r = t.rotation();
        let ry = (-r[(2, 0)]).atan2((r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt());
        let rx = r[(2, 1)].atan2(r[(2, 2)]);
        let rz = r[(1, 0)].atan2(r[(0, 0)]);
        let p = t.translation();
        Pose6 {
            t: [p.x, p.y, p.z],
            r: [rx, ry, rz],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().chain(&self.r).all(|v| v.is_finite())
    }
}

pub fn euler_rotation(r: [f64; 3]) -> Matrix3<f64> {
    let (sx, cx) = r[0].sin_cos();
    let (sy, cy) = r[1].sin_cos();
    let (sz, cz) = r[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Homogeneous rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform(pub Matrix4<f64>);

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Transform(Matrix4::identity())
    }

    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Transform(m)
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::from(t))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self::from_parts(rt, -(rt * self.translation()))
    }

    /// `self · other`.
    pub fn compose(&self, other: &Transform) -> Self {
        Transform(self.0 * other.0)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Angle of the rotation part in radians.
    pub fn rotation_angle(&self) -> f64 {
        let r = self.rotation();
        // atan2 form stays accurate near 0 and π, where acos loses digits
        let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (skew.norm() / 2.0).atan2((r.trace() - 1.0) / 2.0)
    }

    /// Parses a KITTI-style row-major 3×4 pose.
    pub fn from_row12(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::data(format!("pose row needs 12 values, got {}", v.len())));
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = v[r * 4 + c];
            }
        }
        Ok(Transform(m))
    }

    pub fn to_row12(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    /// Checks `RᵀR = I`, `det R = +1` and the bottom row.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() < tol;
        let det = (r.determinant() - 1.0).abs() < tol;
        let bottom = (self.0.row(3) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() < tol;
        ortho && det && bottom
    }
}

/// Source-image coordinates of target pixel `(u, v)` with inverse depth
/// `d`, or `None` when the transformed point is not in front of the camera.
pub fn reproject(u: f64, v: f64, d: f64, k: &Intrinsics, t: &Transform) -> Option<(f64, f64)> {
    let p = t.apply(&k.back_project(u, v, 1.0 / d.max(D_MIN)));
    (p.z > Z_MIN).then(|| k.project(&p))
}

/// Rotation entries `R[i][j]` (row-major) and translation of a `[B, 6]`
/// pose tensor, each of shape `[B, 1]`.
pub struct PoseEntries<T: Scalar> {
    pub r: [Tensor<T>; 9],
    pub t: [Tensor<T>; 3],
}

pub fn pose_entries<T: Scalar>(pose: &Tensor<T>) -> Result<PoseEntries<T>> {
    if pose.ndim() != 2 || pose.dim(1) != 6 {
        return Err(Error::config(format!("pose tensor must be [B, 6], got {:?}", pose.shape())));
    }
    let col = |i: usize| pose.slice(1, i, 1);
    let t = [col(0)?, col(1)?, col(2)?];
    let (rx, ry, rz) = (col(3)?, col(4)?, col(5)?);
    let (sx, cx) = (rx.sin(), rx.cos());
    let (sy, cy) = (ry.sin(), ry.cos());
    let (sz, cz) = (rz.sin(), rz.cos());
    let szy = sz.mul(&sy)?;
    let czy = cz.mul(&sy)?;
    let r = [
        cz.mul(&cy)?,
        czy.mul(&sx)?.sub(&sz.mul(&cx)?)?,
        czy.mul(&cx)?.add(&sz.mul(&sx)?)?,
        sz.mul(&cy)?,
        szy.mul(&sx)?.add(&cz.mul(&cx)?)?,
        szy.mul(&cx)?.sub(&cz.mul(&sx)?)?,
        sy.neg(),
        cy.mul(&sx)?,
        cy.mul(&cx)?,
    ];
    Ok(PoseEntries { r, t })
}

/// Differentiable `[B, 3, 4]` matrix `[R | t]` of a `[B, 6]` pose tensor.
pub fn pose_to_matrix<T: Scalar>(pose: &Tensor<T>) -> Result<Tensor<T>> {
    let e = pose_entries(pose)?;
    let mut cols = Vec::with_capacity(12);
    for row in 0..3 {
        cols.extend([&e.r[3 * row], &e.r[3 * row + 1], &e.r[3 * row + 2], &e.t[row]]);
    }
    Ok(Tensor::concat(&cols, 1)?.reshape(&[pose.dim(0), 3, 4])?)
}

/// Warped image and its validity mask.
pub struct Warp<T: Scalar> {
    pub image: Tensor<T>,
    /// `[B, 1, H, W]`, 1 where the point is in front of the source camera and
    /// every bilinear tap with nonzero weight lies inside the image.
    pub mask: Tensor<T>,
}

fn pixel_rays<T: Scalar>(k: &Intrinsics) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (k.height, k.width);
    let mut rx = Vec::with_capacity(h * w);
    let mut ry = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            rx.push((u as f64 - k.cx) / k.fx);
            ry.push((v as f64 - k.cy) / k.fy);
        }
    }
    Ok((Tensor::from_f64(&rx, &[1, 1, h, w])?, Tensor::from_f64(&ry, &[1, 1, h, w])?))
}

/// Inverse warp: every target pixel is back-projected with `inv_depth`
/// (`[B, 1, H, W]`), moved into the source camera by `pose` (`[B, 6]`) and
/// bilinearly sampled from `src` (`[B, C, H, W]`). Gradients flow to the
/// source values, the inverse depth and the pose.
pub fn warp_image<T: Scalar>(src: &Tensor<T>, inv_depth: &Tensor<T>, k: &Intrinsics, pose: &Tensor<T>) -> Result<Warp<T>> {
    let (b, h, w) = (src.dim(0), k.height, k.width);
    if src.ndim() != 4 || src.dim(2) != h || src.dim(3) != w {
        return Err(Error::config(format!("source image {:?} does not match intrinsics {}x{}", src.shape(), w, h)));
    }
    if inv_depth.shape() != [b, 1, h, w] {
        return Err(Error::config(format!(
            "inverse depth {:?} does not match source image {:?}",
            inv_depth.shape(),
            src.shape()
        )));
    }
    let e = pose_entries(pose)?;
    let per_batch = |t: &Tensor<T>| t.reshape(&[b, 1, 1, 1]);
    let r: Vec<Tensor<T>> = e.r.iter().map(per_batch).collect::<std::result::Result<_, _>>()?;
    let tr: Vec<Tensor<T>> = e.t.iter().map(per_batch).collect::<std::result::Result<_, _>>()?;

    let (rx, ry) = pixel_rays::<T>(k)?;
    let z = Tensor::ones(&[1, 1, 1, 1]).div(&inv_depth.clamp_min(D_MIN))?;
    // R·(ray·z) + t, with the ray's third component equal to 1
    let axis = |i: usize| -> Result<Tensor<T>> {
        let dir = r[3 * i].mul(&rx)?.add(&r[3 * i + 1].mul(&ry)?)?.add(&r[3 * i + 2])?;
        Ok(dir.mul(&z)?.add(&tr[i])?)
    };
    let (px, py, pz) = (axis(0)?, axis(1)?, axis(2)?);
    let pz_safe = pz.clamp_min(Z_MIN);
    let u = px.div(&pz_safe)?.mul_scalar(k.fx).add_scalar(k.cx);
    let v = py.div(&pz_safe)?.mul_scalar(k.fy).add_scalar(k.cy);

    let (uu, vv, zz) = (u.to_f64_vec(), v.to_f64_vec(), pz.to_f64_vec());
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    let mask: Vec<f64> = (0..uu.len())
        .map(|i| {
            let inside = zz[i] > Z_MIN && (0.0..=wmax).contains(&uu[i]) && (0.0..=hmax).contains(&vv[i]);
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_f64(&mask, &[b, 1, h, w])?;

    let coords = Tensor::concat(&[&u.reshape(&[b, h, w, 1])?, &v.reshape(&[b, h, w, 1])?], 3)?;
    let image = src.bilinear_sample(&coords)?;
    Ok(Warp { image, mask })
}

/// Converts pixel disparity to inverse depth, `disp / (fx·baseline)`,
/// clamped to `[D_MIN, D_MAX]`.
pub fn disparity_to_inverse_depth<T: Scalar>(disp: &Tensor<T>, fx: f64, baseline: f64) -> Result<Tensor<T>> {
    if !(baseline > 0.0) || !(fx > 0.0) {
        return Err(Error::config(format!("disparity conversion needs fx > 0 and baseline > 0, got fx={fx} baseline={baseline}")));
    }
    Ok(disp.mul_scalar(1.0 / (fx * baseline)).clamp(D_MIN, D_MAX))
}

/// Camera calibration read from a `key = value` text file with keys
/// `fx, fy, cx, cy, baseline, width, height`. `#` starts a comment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub intrinsics: Intrinsics,
    pub baseline: f64,
}

impl Calibration {
    pub fn parse(text: &str) -> Result<Self> {
        let mut vals = std::collections::HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("calibration line {}: expected key = value", n + 1)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("calibration line {}: `{}` is not a number", n + 1, value.trim())))?;
            vals.insert(key.trim().to_string(), value);
        }
        let get = |key: &str| vals.get(key).copied().ok_or_else(|| Error::data(format!("calibration is missing `{key}`")));
        let intrinsics = Intrinsics::new(
            get("fx")?,
            get("fy")?,
            get("cx")?,
            get("cy")?,
            get("width")? as usize,
            get("height")? as usize,
        )?;
        let baseline = get("baseline")?;
        if !(baseline > 0.0) {
            return Err(Error::data(format!("calibration baseline must be positive, got {baseline}")));
        }
        Ok(Calibration { intrinsics, baseline })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn resized(&self, width: usize, height: usize) -> Self {
        Calibration {
            intrinsics: self.intrinsics.resized(width, height),
            baseline: self.baseline,
        }
    }
}

impl fmt::Display for Calibration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = &self.intrinsics;
        writeln!(f, "fx = {}", k.fx)?;
        writeln!(f, "fy = {}", k.fy)?;
        writeln!(f, "cx = {}", k.cx)?;
        writeln!(f, "cy = {}", k.cy)?;
        writeln!(f, "baseline = {}", self.baseline)?;
        writeln!(f, "width = {}", k.width)?;
        writeln!(f, "height = {}", k.height)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 25.0, 100, 50).unwrap()
    }

    #[test]
    fn zero_pose_is_identity() {
        assert_eq!(Pose6::default().to_transform(), Transform::identity());
    }

    #[test]
    fn translation_only_pose() {
        let t = Pose6::new([1.0, 0.0, 0.0], [0.0; 3]).to_transform();
        assert_eq!(t.rotation(), Matrix3::identity());
        assert_eq!(t.translation(), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn ry_quarter_turn_maps_z_to_x() {
        let t = Pose6::new([0.0; 3], [0.0, std::f64::consts::FRAC_PI_2, 0.0]).to_transform();
        let p = t.apply(&Vector3::z());
        assert!((p - Vector3::x()).norm() < 1e-15);
    }

    #[test]
    fn reproject_translation_example() {
        let t = Pose6::new([0.2, 0.0, 0.0], [0.0; 3]).to_transform();
        let (u, v) = reproject(50.0, 25.0, 0.5, &k100(), &t).unwrap();
        assert!((u - 60.0).abs() < 1e-12 && (v - 25.0).abs() < 1e-12);
    }

    #[test]
    fn reproject_behind_camera_is_none() {
        let t = Pose6::new([0.0, 0.0, -5.0], [0.0; 3]).to_transform();
        assert!(reproject(50.0, 25.0, 0.5, &k100(), &t).is_none());
    }

    #[test]
    fn euler_round_trip() {
        let p = Pose6::new([0.3, -0.2, 1.5], [0.1, -0.25, 0.05]);
        let q = Pose6::from_transform(&p.to_transform());
        for (a, b) in p.to_array().iter().zip(q.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_matrix_matches_nalgebra() {
        let p = [0.3, -0.2, 1.5, 0.1, -0.25, 0.05];
        let m = pose_to_matrix(&Tensor::<f64>::from_vec(p.to_vec(), &[1, 6]).unwrap()).unwrap();
        let t = Pose6::from_slice(&p).to_transform();
        for (a, b) in m.to_vec().iter().zip(t.to_row12()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rotation_angle_of_known_rotation() {
        let t = Pose6::new([0.0; 3], [0.0, 0.0, 0.3]).to_transform();
        assert!((t.rotation_angle() - 0.3).abs() < 1e-14);
        assert_eq!(Transform::identity().rotation_angle(), 0.0);
    }

    #[test]
    fn disparity_conversion() {
        let d = Tensor::<f64>::from_vec(vec![50.0, 5.0, 0.0], &[3]).unwrap();
        let inv = disparity_to_inverse_depth(&d, 100.0, 0.5).unwrap().to_vec();
        assert!((inv[0] - 1.0).abs() < 1e-15);
        assert!((1.0 / inv[1] - 10.0).abs() < 1e-12);
        assert_eq!(inv[2], D_MIN);
        assert!(disparity_to_inverse_depth(&d, 100.0, 0.0).is_err());
    }

    #[test]
    fn calibration_parse_round_trip() {
        let c = Calibration::parse("# test rig\nfx = 100\nfy=100\ncx=50\ncy=25\nbaseline=0.5\nwidth=100\nheight=50\n").unwrap();
        assert_eq!(Calibration::parse(&c.to_string()).unwrap(), c);
        let err = Calibration::parse("fx=1").unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");
    }

    #[test]
    fn resize_scales_focal_length() {
        let k = Intrinsics::new(721.5, 721.5, 609.6, 172.9, 1242, 375).unwrap();
        let r = k.resized(416, 128);
        assert!((r.fx - 721.5 * 416.0 / 1242.0).abs() < 1e-12);
    }
}
