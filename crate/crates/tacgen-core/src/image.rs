//! RGB tactile frames and background-difference arithmetic.
//!
//! Frames are stored as 8-bit RGB (shape `(h, w, 3)`); arithmetic happens on
//! an `f64` view in `[0, 1]` and results are re-quantized with
//! round-half-away-from-zero. Quantization error per conversion is at most
//! half a level, so subtract/add round-trips stay within 1/255 per channel.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, Zip};

use crate::error::{CoreError, Result};

/// 8-bit RGB frame, shape `(h, w, 3)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TactileImage {
    data: Array3<u8>,
}

impl TactileImage {
    pub fn new(data: Array3<u8>) -> Self {
        assert_eq!(data.shape()[2], 3, "tactile frames are RGB");
        Self { data }
    }

    /// Quantizes an `f64` array in `[0, 1]`; values outside are clamped.
    pub fn from_f64(data: &Array3<f64>) -> Self {
        let q = data.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        Self::new(q)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::new(Array3::zeros((h, w, 3)))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    /// View scaled to `[0, 1]`.
    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(|v| v as f64 / 255.0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w, h);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let (yy, xx) = (y as usize, x as usize);
            *px = Rgb([self.data[[yy, xx, 0]], self.data[[yy, xx, 1]], self.data[[yy, xx, 2]]]);
        }
        buf.save(path).map_err(|source| CoreError::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CoreError::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((h, w, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c];
            }
        }
        Ok(Self::new(data))
    }

    /// Mean absolute per-channel difference on the `[0, 1]` scale.
    pub fn mean_abs_diff(&self, other: &TactileImage) -> f64 {
        let mut acc = 0u64;
        Zip::from(&self.data).and(&other.data).for_each(|&a, &b| {
            acc += (a as i64 - b as i64).unsigned_abs() as u64;
        });
        acc as f64 / (self.data.len() as f64 * 255.0)
    }
}

/// Sensor background (gel at rest). Same storage as a frame; the newtype keeps
/// call sites honest about which argument is the background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundImage(pub TactileImage);

impl BackgroundImage {
    pub fn image(&self) -> &TactileImage {
        &self.0
    }
}

fn check_same_shape(a: &TactileImage, b: &TactileImage, what: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CoreError::ShapeMismatch {
            what: what.to_string(),
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        });
    }
    Ok(())
}

/// Difference frame re-centred at mid-gray: `clamp(image - background + 0.5)`.
/// A frame equal to its background maps to uniform 0.5 (quantized to 128).
pub fn subtract_background(image: &TactileImage, background: &BackgroundImage) -> Result<TactileImage> {
    check_same_shape(image, background.image(), "subtract_background")?;
    let a = image.to_f64();
    let b = background.image().to_f64();
    Ok(TactileImage::from_f64(&(a - b + 0.5)))
}

/// Inverse of [`subtract_background`]: `clamp(diff - 0.5 + background)`.
pub fn add_background(diff: &TactileImage, background: &BackgroundImage) -> Result<TactileImage> {
    check_same_shape(diff, background.image(), "add_background")?;
    let d = diff.to_f64();
    let b = background.image().to_f64();
    Ok(TactileImage::from_f64(&(d - 0.5 + b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gradient_image(h: usize, w: usize) -> TactileImage {
        let mut a = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    a[[y, x, c]] = ((x * 7 + y * 13 + c * 31) % 256) as u8;
                }
            }
        }
        TactileImage::new(a)
    }

    #[test]
    fn equal_frame_maps_to_mid_gray() {
        let bg = BackgroundImage(gradient_image(8, 8));
        let diff = subtract_background(bg.image(), &bg).unwrap();
        assert!(diff.data().iter().all(|&v| v == 128));
    }

    #[test]
    fn constant_offset_maps_above_mid_gray() {
        let mut raw = Array3::from_elem((4, 4, 3), 0.25f64);
        let bg = BackgroundImage(TactileImage::from_f64(&raw));
        raw += 0.25;
        let img = TactileImage::from_f64(&raw);
        let diff = subtract_background(&img, &bg).unwrap();
        // Quantized: 0.25 -> 64, 0.5 -> 128; 128 - 64 + 127.5 rounds to 192.
        assert!(diff.data().iter().all(|&v| v == 192));
    }

    #[test]
    fn subtract_then_add_round_trips_within_one_level() {
        let bg = BackgroundImage(gradient_image(16, 16));
        // Keep the diff away from the clamp boundaries: contact deltas are small.
        let mut raw = bg.image().to_f64();
        for (i, v) in raw.iter_mut().enumerate() {
            *v = (*v + ((i % 64) as f64 - 32.0) / 255.0).clamp(0.1, 0.9);
        }
        let img = TactileImage::from_f64(&raw);
        let diff = subtract_background(&img, &bg).unwrap();
        let back = add_background(&diff, &bg).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((*a as i32 - *b as i32).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let img = gradient_image(9, 13);
        let dir = std::env::temp_dir().join("tacgen_core_png_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frame.png");
        img.save_png(&path).unwrap();
        let back = TactileImage::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = gradient_image(8, 8);
        let bg = BackgroundImage(gradient_image(8, 9));
        assert!(subtract_background(&a, &bg).is_err());
    }
}
