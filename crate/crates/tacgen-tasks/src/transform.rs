//! Classical image augmentation: the fixed rotation/flip/scale/translation
//! grid (864 variants) optionally crossed with six hue rotations (5,184),
//! enumerated exhaustively per reference image.

use std::path::Path;

use ndarray::Array3;
use tacgen_core::{Manifest, Provenance, SampleRecord, Split, TactileImage};

use crate::augment::AugmentReport;
use crate::error::{Result, TaskError};

const ROTATIONS: [i32; 8] = [0, 45, 90, 135, 180, 225, 270, 315];
const FLIPS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];
const SCALES: [f64; 3] = [0.8, 1.0, 1.2];
const SHIFTS: [i32; 3] = [-20, 0, 20];
const HUE_STEPS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricVariant {
    pub rot_deg: i32,
    pub flip_v: bool,
    pub flip_h: bool,
    pub scale: f64,
    pub dx: i32,
    pub dy: i32,
}

impl GeometricVariant {
    pub fn is_identity(&self) -> bool {
        self.rot_deg == 0
            && !self.flip_v
            && !self.flip_h
            && self.scale == 1.0
            && self.dx == 0
            && self.dy == 0
    }
}

/// The full geometric grid in a fixed enumeration order:
/// rotation, then flip, then scale, then the two shift axes.
pub fn geometric_grid() -> Vec<GeometricVariant> {
    let mut out = Vec::with_capacity(ROTATIONS.len() * FLIPS.len() * SCALES.len() * 9);
    for rot in ROTATIONS {
        for (flip_v, flip_h) in FLIPS {
            for scale in SCALES {
                for dx in SHIFTS {
                    for dy in SHIFTS {
                        out.push(GeometricVariant { rot_deg: rot, flip_v, flip_h, scale, dx, dy });
                    }
                }
            }
        }
    }
    out
}

fn bilinear(src: &Array3<f64>, x: f64, y: f64, c: usize) -> f64 {
    let (h, w) = (src.shape()[0] as isize, src.shape()[1] as isize);
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let v00 = src[[clamp(y0, h), clamp(x0, w), c]];
    let v01 = src[[clamp(y0, h), clamp(x0 + 1, w), c]];
    let v10 = src[[clamp(y0 + 1, h), clamp(x0, w), c]];
    let v11 = src[[clamp(y0 + 1, h), clamp(x0 + 1, w), c]];
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Warp about the frame centre: flip, scale, rotate, then shift. Sampling is
/// bilinear with clamp-to-edge; the identity variant reproduces the source
/// exactly.
pub fn warp_f64(src: &Array3<f64>, v: &GeometricVariant) -> Array3<f64> {
    let (h, w, ch) = src.dim();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let rad = (v.rot_deg as f64).to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    Array3::from_shape_fn((h, w, ch), |(y, x, c)| {
        // Inverse map: undo shift, rotation, scale, then flip.
        let px = x as f64 - cx - v.dx as f64;
        let py = y as f64 - cy - v.dy as f64;
        let rx = (cos * px + sin * py) / v.scale;
        let ry = (-sin * px + cos * py) / v.scale;
        let mut sx = rx + cx;
        let mut sy = ry + cy;
        if v.flip_h {
            sx = w as f64 - 1.0 - sx;
        }
        if v.flip_v {
            sy = h as f64 - 1.0 - sy;
        }
        bilinear(src, sx, sy, c)
    })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Rotates every pixel's hue by `deg`; a zero rotation is an exact no-op.
pub fn hue_rotate_f64(src: &Array3<f64>, deg: f64) -> Array3<f64> {
    if deg == 0.0 {
        return src.clone();
    }
    let (h, w, _) = src.dim();
    let mut out = src.clone();
    for y in 0..h {
        for x in 0..w {
            let (hh, s, v) = rgb_to_hsv(src[[y, x, 0]], src[[y, x, 1]], src[[y, x, 2]]);
            let (r, g, b) = hsv_to_rgb(hh + deg, s, v);
            out[[y, x, 0]] = r;
            out[[y, x, 1]] = g;
            out[[y, x, 2]] = b;
        }
    }
    out
}

pub fn warp_image(img: &TactileImage, v: &GeometricVariant) -> TactileImage {
    TactileImage::from_f64(&warp_f64(&img.to_f64(), v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraditionalMode {
    Geometric,
    GeometricColor,
}

/// Exhaustive classical augmentation of one reference per class. Every
/// record keeps its reference's labels. The variant grid is fixed, so the
/// output is deterministic regardless of seed.
pub fn traditional_augment(
    src: &Manifest,
    ref_ids: &[&str],
    mode: TraditionalMode,
    out_dir: &Path,
    seed: u64,
) -> Result<AugmentReport> {
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source: std::io::Error| TaskError::Io { path: p, source }
    };
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    for d in [out_dir, &images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut manifest = Manifest::new(src.sensor, seed, out_dir.to_path_buf());
    let grid = geometric_grid();
    let hues: Vec<f64> = match mode {
        TraditionalMode::Geometric => vec![0.0],
        TraditionalMode::GeometricColor => {
            (0..HUE_STEPS).map(|k| k as f64 * 360.0 / HUE_STEPS as f64).collect()
        }
    };

    for ref_id in ref_ids {
        let record = src
            .sample_by_id(ref_id)
            .ok_or_else(|| TaskError::NoSuchSample { id: ref_id.to_string() })?;
        if let Some(info) = src.objects.get(&record.object_id) {
            manifest.objects.insert(record.object_id.clone(), *info);
        }
        let reference = src.load_image(record)?.to_f64();
        src.load_background(record)?
            .image()
            .save_png(&out_dir.join(format!("{ref_id}.background.png")))?;
        src.load_mask(record)?.save_png(&masks_dir.join(format!("{ref_id}.png")))?;

        let mut index = 0usize;
        for variant in &grid {
            let warped = warp_f64(&reference, variant);
            for &hue in &hues {
                let image = TactileImage::from_f64(&hue_rotate_f64(&warped, hue));
                let id = format!("{ref_id}.g{index:05}");
                image.save_png(&images_dir.join(format!("{id}.png")))?;
                manifest.push_validated(SampleRecord {
                    id: id.clone(),
                    image: format!("images/{id}.png"),
                    background: format!("{ref_id}.background.png"),
                    mask: format!("masks/{ref_id}.png"),
                    height: None,
                    force: record.force,
                    pose: record.pose,
                    object_id: record.object_id.clone(),
                    split: Split::Train,
                    provenance: Provenance::Generated,
                })?;
                index += 1;
            }
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(AugmentReport { manifest, rejected_forces: 0, skipped_transforms: 0 })
}

/// Variants per reference for each mode: 8 rotations x 4 flips x 3 scales
/// x 9 shifts = 864, times 6 hues = 5,184.
pub fn traditional_count(mode: TraditionalMode) -> usize {
    match mode {
        TraditionalMode::Geometric => 864,
        TraditionalMode::GeometricColor => 5184,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tacgen_core::rng::tagged_rng;

    fn random_image(seed: u64, h: usize, w: usize) -> TactileImage {
        let mut rng = tagged_rng(seed, "warp.test", 0);
        TactileImage::from_f64(&Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn grid_size_matches_the_fixed_enumeration() {
        let grid = geometric_grid();
        assert_eq!(grid.len(), 864);
        assert_eq!(grid.iter().filter(|v| v.is_identity()).count(), 1);
        assert_eq!(traditional_count(TraditionalMode::Geometric), 864);
        assert_eq!(traditional_count(TraditionalMode::GeometricColor), 5184);
    }

    #[test]
    fn identity_variant_reproduces_the_source_exactly() {
        let img = random_image(1, 17, 23);
        let id = GeometricVariant {
            rot_deg: 0,
            flip_v: false,
            flip_h: false,
            scale: 1.0,
            dx: 0,
            dy: 0,
        };
        let out = warp_image(&img, &id);
        assert_eq!(out.data(), img.data());
        let hued = hue_rotate_f64(&img.to_f64(), 0.0);
        assert_eq!(TactileImage::from_f64(&hued).data(), img.data());
    }

    #[test]
    fn pure_translation_shifts_pixels() {
        let mut raw = Array3::<f64>::zeros((8, 8, 3));
        raw[[3, 2, 0]] = 1.0;
        let v = GeometricVariant { rot_deg: 0, flip_v: false, flip_h: false, scale: 1.0, dx: 3, dy: 1 };
        let out = warp_f64(&raw, &v);
        assert!((out[[4, 5, 0]] - 1.0).abs() < 1e-12);
        assert!(out[[3, 2, 0]].abs() < 1e-12);
    }

    #[test]
    fn flips_mirror_the_image() {
        let img = random_image(2, 8, 8).to_f64();
        let v = GeometricVariant { rot_deg: 0, flip_v: false, flip_h: true, scale: 1.0, dx: 0, dy: 0 };
        let out = warp_f64(&img, &v);
        for y in 0..8 {
            for x in 0..8 {
                assert!((out[[y, x, 0]] - img[[y, 7 - x, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_rotation_matches_exact_permutation() {
        let img = random_image(3, 9, 9).to_f64();
        let v = GeometricVariant { rot_deg: 90, flip_v: false, flip_h: false, scale: 1.0, dx: 0, dy: 0 };
        let out = warp_f64(&img, &v);
        // Rotation by 90 degrees about the centre maps source (y, x) to
        // output coordinates (x_out, y_out) = (cx - (y - cy), cy + (x - cx)).
        for y in 0..9 {
            for x in 0..9 {
                let xo = 4 + 4 - y;
                let yo = x;
                assert!(
                    (out[[yo, xo, 1]] - img[[y, x, 1]]).abs() < 1e-9,
                    "mismatch at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn hue_rotation_preserves_value_and_is_periodic() {
        let img = random_image(4, 6, 6).to_f64();
        let shifted = hue_rotate_f64(&img, 120.0);
        for y in 0..6 {
            for x in 0..6 {
                let vin = img[[y, x, 0]].max(img[[y, x, 1]]).max(img[[y, x, 2]]);
                let vout = shifted[[y, x, 0]].max(shifted[[y, x, 1]]).max(shifted[[y, x, 2]]);
                assert!((vin - vout).abs() < 1e-9, "value channel preserved");
            }
        }
        let back = hue_rotate_f64(&hue_rotate_f64(&shifted, 120.0), 120.0);
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-9, "three 120-degree steps close the loop");
        }
    }
}
