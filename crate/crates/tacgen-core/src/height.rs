//! Gel indentation depth maps.
//!
//! Heights are stored in millimetres and serialized as 16-bit grayscale PNG
//! under a fixed full-scale depth, so files are portable and the quantization
//! step (`scale / 65535`) is far below sensor noise.

use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::mask::ContactMask;

/// Full-scale depth for 16-bit height PNGs, in millimetres.
pub const HEIGHT_SCALE_MM: f64 = 4.0;

/// Indentation depth per pixel in millimetres, shape `(h, w)`, >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    depth_mm: Array2<f64>,
}

impl HeightMap {
    pub fn new(depth_mm: Array2<f64>) -> Self {
        Self { depth_mm }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { depth_mm: Array2::zeros((h, w)) }
    }

    pub fn height(&self) -> usize {
        self.depth_mm.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth_mm.shape()[1]
    }

    pub fn depth_mm(&self) -> &Array2<f64> {
        &self.depth_mm
    }

    pub fn max_depth_mm(&self) -> f64 {
        self.depth_mm.iter().cloned().fold(0.0, f64::max)
    }

    /// Pixels with depth above `eps` millimetres.
    pub fn support(&self, eps: f64) -> ContactMask {
        let bits = self.depth_mm.mapv(|v| if v > eps { 1u8 } else { 0u8 });
        ContactMask::new(bits)
    }

    pub fn save_png(&self, path: &Path, scale_mm: f64) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let mut buf = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w, h);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let v = self.depth_mm[[y as usize, x as usize]];
            let q = (v / scale_mm * 65535.0).round().clamp(0.0, 65535.0) as u16;
            *px = Luma([q]);
        }
        buf.save(path).map_err(|source| CoreError::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path, scale_mm: f64) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CoreError::Image { path: path.to_path_buf(), source })?
            .to_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut depth = Array2::zeros((h, w));
        for (x, y, px) in img.enumerate_pixels() {
            depth[[y as usize, x as usize]] = px.0[0] as f64 * scale_mm / 65535.0;
        }
        Ok(Self { depth_mm: depth })
    }
}
