use std::path::Path;

use image::{imageops, ImageBuffer, Luma, Rgb};
use sganvo_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Planar RGB image, `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok(Self::from_rgb(&img.to_rgb32f()))
    }

    fn from_rgb(buf: &ImageBuffer<Rgb<f32>, Vec<f32>>) -> Self {
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let mut out = Image::new(w, h);
        for (x, y, px) in buf.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c].clamp(0.0, 1.0));
            }
        }
        out
    }

    fn to_rgb(&self) -> ImageBuffer<Rgb<f32>, Vec<f32>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb([0, 1, 2].map(|c| self.get(c, y as usize, x as usize)))
        })
    }

    /// Writes an 8-bit PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb([0, 1, 2].map(|c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        buf.save(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    /// Bilinear (triangle-filter) resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Self::from_rgb(&imageops::resize(&self.to_rgb(), width as u32, height as u32, imageops::FilterType::Triangle))
    }

    /// Mirrors the image left to right.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::from_vec(data, &[1, 3, self.height, self.width]).expect("image extents are positive")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 3 {
            return Err(Error::data(format!("expected a [1, 3, H, W] image tensor, got {:?}", t.shape())));
        }
        Ok(Image {
            width: t.dim(3),
            height: t.dim(2),
            data: t.to_f64_vec().iter().map(|&v| v as f32).collect(),
        })
    }
}

/// Metric depth in metres, 0 where unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// 16-bit depth PNGs store `round(depth · DEPTH_PNG_SCALE)`; 0 is invalid.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let d = self.get(y as usize, x as usize);
            Luma([(d * DEPTH_PNG_SCALE).round().clamp(0.0, u16::MAX as f64) as u16])
        });
        buf.save(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?.to_luma16();
        Ok(DepthMap {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p[0] as f64 / DEPTH_PNG_SCALE).collect(),
        })
    }

    /// Nearest-neighbour resize, which keeps sparse laser samples sparse.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let mut out = DepthMap::new(width, height);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.data[y * width + x] = self.get(sy.min(self.height - 1), sx.min(self.width - 1));
            }
        }
        out
    }
}
