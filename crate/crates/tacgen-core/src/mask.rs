//! Binary contact masks and rigid in-plane transforms.
//!
//! Transform convention: rotate counter-clockwise by `dtheta` degrees about
//! the geometric image centre `((w-1)/2, (h-1)/2)`, then translate by whole
//! pixels `(dx, dy)`. Resampling is nearest-neighbour, so masks stay binary.
//! Multiples of 90 degrees land on the exact pixel lattice for square masks,
//! and the identity transform is bit-exact for any size.

use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Binary contact mask, shape `(h, w)`, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactMask {
    bits: Array2<u8>,
}

impl ContactMask {
    pub fn new(bits: Array2<u8>) -> Self {
        debug_assert!(bits.iter().all(|&v| v <= 1), "mask values must be 0/1");
        Self { bits }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { bits: Array2::zeros((h, w)) }
    }

    pub fn height(&self) -> usize {
        self.bits.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.bits.shape()[1]
    }

    pub fn bits(&self) -> &Array2<u8> {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.bits[[y, x]]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.bits[[y, x]] = if v > 0 { 1 } else { 0 };
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&v| v > 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&v| v == 0)
    }

    /// `[0, 1]` float view (for latent encoding and bilinear sampling).
    pub fn to_f64(&self) -> Array2<f64> {
        self.bits.mapv(|v| v as f64)
    }

    /// Stored as 8-bit grayscale with contact = 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let mut buf = ImageBuffer::<Luma<u8>, Vec<u8>>::new(w, h);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            *px = Luma([self.bits[[y as usize, x as usize]] * 255]);
        }
        buf.save(path).map_err(|source| CoreError::Image { path: path.to_path_buf(), source })
    }

    /// Loads an 8-bit grayscale PNG; any value >= 128 counts as contact.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CoreError::Image { path: path.to_path_buf(), source })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut bits = Array2::zeros((h, w));
        for (x, y, px) in img.enumerate_pixels() {
            bits[[y as usize, x as usize]] = if px.0[0] >= 128 { 1 } else { 0 };
        }
        Ok(Self { bits })
    }

    /// Chebyshev dilation by `r` pixels.
    pub fn dilate(&self, r: usize) -> ContactMask {
        let (h, w) = (self.height(), self.width());
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                if self.bits[[y, x]] == 0 {
                    continue;
                }
                let y0 = y.saturating_sub(r);
                let x0 = x.saturating_sub(r);
                for yy in y0..=(y + r).min(h - 1) {
                    for xx in x0..=(x + r).min(w - 1) {
                        out[[yy, xx]] = 1;
                    }
                }
            }
        }
        ContactMask { bits: out }
    }

    /// True when every set pixel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &ContactMask) -> bool {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .all(|(&a, &b)| a == 0 || b == 1)
    }
}

/// Rigid transform: CCW rotation in whole degrees, then whole-pixel translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTransform {
    pub dx: i32,
    pub dy: i32,
    pub dtheta: i32,
}

impl MaskTransform {
    pub const IDENTITY: MaskTransform = MaskTransform { dx: 0, dy: 0, dtheta: 0 };

    pub fn new(dx: i32, dy: i32, dtheta: i32) -> Self {
        Self { dx, dy, dtheta }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Translations must stay within the frame and the angle within one turn.
    pub fn validate(&self, w: usize, h: usize) -> Result<()> {
        if self.dtheta.abs() >= 360 {
            return Err(CoreError::InvalidTransform(format!(
                "rotation {} deg outside (-360, 360)",
                self.dtheta
            )));
        }
        if self.dx.unsigned_abs() as usize >= w || self.dy.unsigned_abs() as usize >= h {
            return Err(CoreError::InvalidTransform(format!(
                "translation ({}, {}) exceeds frame {}x{}",
                self.dx, self.dy, w, h
            )));
        }
        Ok(())
    }
}

/// Rotation centre used by [`transform_mask`] and pose propagation.
pub fn frame_centre(w: usize, h: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Applies `t` to `mask` by inverse nearest-neighbour lookup. Pixels mapped
/// from outside the source frame are cleared.
pub fn transform_mask(mask: &ContactMask, t: &MaskTransform) -> Result<ContactMask> {
    let (h, w) = (mask.height(), mask.width());
    t.validate(w, h)?;
    let (cx, cy) = frame_centre(w, h);
    let rad = (t.dtheta as f64).to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // Undo translation, then rotate by -dtheta about the centre.
            let px = x as f64 - t.dx as f64 - cx;
            let py = y as f64 - t.dy as f64 - cy;
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;
            let (ix, iy) = (sx.round(), sy.round());
            if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
                continue;
            }
            out[[y, x]] = mask.bits[[iy as usize, ix as usize]];
        }
    }
    Ok(ContactMask { bits: out })
}

/// Centroid of the set pixels, rounded to the nearest whole pixel, as
/// `(cx, cy)` = (column, row). Errors on an empty mask.
pub fn centroid_of_mask(mask: &ContactMask) -> Result<(f64, f64)> {
    let (sx, sy) = centroid_exact(mask)?;
    Ok((sx.round(), sy.round()))
}

/// Unrounded centroid; pose labels use this to avoid compounding rounding.
pub fn centroid_exact(mask: &ContactMask) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for ((y, x), &v) in mask.bits.indexed_iter() {
        if v > 0 {
            n += 1;
            sx += x as f64;
            sy += y as f64;
        }
    }
    if n == 0 {
        return Err(CoreError::EmptyMask);
    }
    Ok((sx / n as f64, sy / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(w: usize, h: usize, pts: &[(usize, usize)]) -> ContactMask {
        let mut m = ContactMask::zeros(h, w);
        for &(x, y) in pts {
            m.set(x, y, 1);
        }
        m
    }

    #[test]
    fn identity_is_bit_exact() {
        let m = blob(64, 64, &[(10, 20), (11, 20), (12, 21), (40, 50)]);
        let out = transform_mask(&m, &MaskTransform::IDENTITY).unwrap();
        assert_eq!(m, out);
    }

    #[test]
    fn pure_translation_moves_pixels() {
        let m = blob(64, 64, &[(10, 20)]);
        let out = transform_mask(&m, &MaskTransform::new(5, -3, 0)).unwrap();
        assert_eq!(out.get(15, 17), 1);
        assert_eq!(out.area(), 1);
    }

    #[test]
    fn quarter_turn_is_exact_on_square_frames() {
        // 90 deg about (31.5, 31.5) maps (x, y) -> (63 - y, x).
        let m = blob(64, 64, &[(10, 20), (11, 20)]);
        let out = transform_mask(&m, &MaskTransform::new(0, 0, 90)).unwrap();
        let expected = blob(64, 64, &[(43, 10), (43, 11)]);
        assert_eq!(out, expected);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let m = blob(64, 64, &[(10, 20), (11, 20), (12, 21), (30, 31), (40, 50)]);
        let mut cur = m.clone();
        for _ in 0..4 {
            cur = transform_mask(&cur, &MaskTransform::new(0, 0, 90)).unwrap();
        }
        assert_eq!(cur, m);
    }

    #[test]
    fn out_of_frame_pixels_are_cleared() {
        let m = blob(8, 8, &[(7, 7)]);
        let out = transform_mask(&m, &MaskTransform::new(1, 1, 0)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn oversized_transform_is_rejected() {
        let m = blob(8, 8, &[(1, 1)]);
        assert!(transform_mask(&m, &MaskTransform::new(8, 0, 0)).is_err());
        assert!(transform_mask(&m, &MaskTransform::new(0, 0, 360)).is_err());
    }

    #[test]
    fn centroid_of_single_pixel() {
        let m = blob(32, 32, &[(10, 20)]);
        assert_eq!(centroid_of_mask(&m).unwrap(), (10.0, 20.0));
    }

    #[test]
    fn centroid_of_empty_mask_errors() {
        assert!(centroid_of_mask(&ContactMask::zeros(8, 8)).is_err());
    }

    #[test]
    fn dilation_contains_original() {
        let m = blob(16, 16, &[(5, 5), (9, 3)]);
        let d = m.dilate(2);
        assert!(m.is_subset_of(&d));
        assert_eq!(d.get(7, 7), 1);
        assert_eq!(d.get(12, 12), 0);
    }
}
