//! Image-quality metrics and evaluation reports.
//!
//! SSIM follows the standard single-scale form: 11x11 Gaussian window with
//! sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0, valid windows only
//! (no padding), averaged over windows and channels. Two implementations are
//! provided: a separable-filter fast path and a direct per-window reference
//! used to cross-check it. Pixel MSE is reported on the 0..255 level scale.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::image::TactileImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_L: f64 = 1.0;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn check_pair(a: &TactileImage, b: &TactileImage) -> Result<(usize, usize)> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CoreError::ShapeMismatch {
            what: "metric pair".into(),
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        });
    }
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(CoreError::ImageTooSmall { w: a.width(), h: a.height(), win: SSIM_WINDOW });
    }
    Ok((a.height(), a.width()))
}

/// Valid-mode separable filter with the same 1D kernel on both axes.
fn filter_valid(src: &Array2<f64>, kernel: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * src[[y, x + k]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * rows[[y + k, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn channel(src: &Array3<f64>, c: usize) -> Array2<f64> {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = src[[y, x, c]];
        }
    }
    out
}

/// Mean SSIM over valid windows and channels; 1.0 iff the images are equal.
pub fn ssim(a: &TactileImage, b: &TactileImage) -> Result<f64> {
    check_pair(a, b)?;
    let (c1, c2) = ((SSIM_K1 * SSIM_L).powi(2), (SSIM_K2 * SSIM_L).powi(2));
    let kernel = ssim_kernel();
    let af = a.to_f64();
    let bf = b.to_f64();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = channel(&af, c);
        let y = channel(&bf, c);
        let mu_x = filter_valid(&x, &kernel);
        let mu_y = filter_valid(&y, &kernel);
        let xx = filter_valid(&(&x * &x), &kernel);
        let yy = filter_valid(&(&y * &y), &kernel);
        let xy = filter_valid(&(&x * &y), &kernel);
        for ((i, j), mx) in mu_x.indexed_iter() {
            let my = mu_y[[i, j]];
            let sx = xx[[i, j]] - mx * mx;
            let sy = yy[[i, j]] - my * my;
            let sxy = xy[[i, j]] - mx * my;
            let v = ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sx + sy + c2));
            total += v;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Direct per-window SSIM, O(pixels * window^2). Exists to cross-check the
/// separable path; do not use it on large batches.
pub fn ssim_reference(a: &TactileImage, b: &TactileImage) -> Result<f64> {
    let (h, w) = check_pair(a, b)?;
    let (c1, c2) = ((SSIM_K1 * SSIM_L).powi(2), (SSIM_K2 * SSIM_L).powi(2));
    let k1d = ssim_kernel();
    let mut weights = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = k1d[i] * k1d[j];
        }
    }
    let af = a.to_f64();
    let bf = b.to_f64();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for i in 0..=(h - SSIM_WINDOW) {
            for j in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let wgt = weights[u][v];
                        let xv = af[[i + u, j + v, c]];
                        let yv = bf[[i + u, j + v, c]];
                        mx += wgt * xv;
                        my += wgt * yv;
                        sxx += wgt * xv * xv;
                        syy += wgt * yv * yv;
                        sxy += wgt * xv * yv;
                    }
                }
                let sx = sxx - mx * mx;
                let sy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (sx + sy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean squared error on the 0..255 level scale (exact integer arithmetic).
pub fn pixel_mse(a: &TactileImage, b: &TactileImage) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CoreError::ShapeMismatch {
            what: "metric pair".into(),
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        });
    }
    let mut acc: u64 = 0;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = *x as i64 - *y as i64;
        acc += (d * d) as u64;
    }
    Ok(acc as f64 / a.data().len() as f64)
}

/// Mean absolute error between paired scalar sequences.
pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mae over mismatched lengths");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// Colour ramp for error maps: black -> red -> yellow -> white, strictly
/// luminance-monotone in the error level.
pub fn error_ramp(level: u8) -> [u8; 3] {
    let v = level as u32;
    if v <= 85 {
        [(3 * v) as u8, 0, 0]
    } else if v <= 170 {
        [255, (3 * (v - 85)) as u8, 0]
    } else {
        [255, 255, (3 * (v - 170)) as u8]
    }
}

/// Inverse of [`error_ramp`]; exact for every producible colour.
pub fn error_ramp_index(rgb: [u8; 3]) -> u8 {
    if rgb[2] > 0 {
        170 + rgb[2] / 3
    } else if rgb[1] > 0 {
        85 + rgb[1] / 3
    } else if rgb[0] < 255 {
        rgb[0] / 3
    } else {
        85
    }
}

/// Per-pixel absolute error (mean over channels) rendered through the ramp.
pub fn error_map(a: &TactileImage, b: &TactileImage) -> Result<TactileImage> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CoreError::ShapeMismatch {
            what: "error map pair".into(),
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        });
    }
    let (h, w) = (a.height(), a.width());
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let mut d = 0u32;
            for c in 0..3 {
                d += (a.data()[[y, x, c]] as i32 - b.data()[[y, x, c]] as i32).unsigned_abs();
            }
            let level = ((d as f64 / 3.0).round() as u32).min(255) as u8;
            let rgb = error_ramp(level);
            for c in 0..3 {
                out[[y, x, c]] = rgb[c];
            }
        }
    }
    Ok(TactileImage::new(out))
}

/// One aggregate row of a generation-quality report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub split: String,
    pub n: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ReportRow {
    /// Aggregates per-sample metric lists (population standard deviation).
    pub fn from_samples(model: &str, split: &str, mse: &[f64], ssim: &[f64]) -> ReportRow {
        assert_eq!(mse.len(), ssim.len(), "metric lists must pair up");
        let (mse_mean, mse_std) = mean_std(mse);
        let (ssim_mean, ssim_std) = mean_std(ssim);
        ReportRow {
            model: model.to_string(),
            split: split.to_string(),
            n: mse.len(),
            mse_mean,
            mse_std,
            ssim_mean,
            ssim_std,
        }
    }
}

/// Versioned CSV report. Serialization is byte-deterministic: fixed header,
/// fixed float precision, row order as given.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_SCHEMA: &str = "# tacgen-report-v1";

impl GenerationReport {
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        s.push_str(REPORT_SCHEMA);
        s.push('\n');
        s.push_str("model,split,n,mse_mean,mse_std,ssim_mean,ssim_std\n");
        for r in &self.rows {
            assert!(
                !r.model.contains(',') && !r.split.contains(','),
                "report labels must not contain commas"
            );
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.model, r.split, r.n, r.mse_mean, r.mse_std, r.ssim_mean, r.ssim_std
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string().as_bytes())
            .map_err(|source| CoreError::Io { path: path.to_path_buf(), source })
    }
}
