//! Synthetic tactile sensor.
//!
//! A deterministic stand-in for gel-sensor captures with known ground truth.
//! Rendering pipeline, all in f64:
//!
//! 1. exact Euclidean distance transform inside the contact mask (frame
//!    border counts as outside, so contact cannot extend past the sensor),
//! 2. Gaussian smoothing of the distance profile, peak-normalized,
//! 3. depth = `k_gel * fz * profile` millimetres,
//! 4. sub-pixel shear shift by `k_shear * (fx, fy)` pixels (bilinear), then
//!    clipped to the shifted mask support,
//! 5. three-light Lambertian shading of the depth field added to a seeded
//!    background; zero depth shades to exactly the background.
//!
//! The map is deterministic, translation-equivariant for interior contacts,
//! and strictly force-monotone in mean absolute deviation from background.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::force::ForceVector;
use crate::image::{BackgroundImage, TactileImage};
use crate::manifest::{Manifest, ObjectInfo, SampleRecord, SensorConfig, Split, Provenance};
use crate::mask::{centroid_exact, transform_mask, ContactMask, MaskTransform};
use crate::height::HeightMap;
use crate::pose::{pose_from_transform, ContactPose, ObjectSymmetry};
use crate::rng::{fnv1a64, splitmix64, tagged_rng};

const EDT_INF: f64 = 1e20;

/// One of the sensor's directional lights.
#[derive(Debug, Clone, Copy)]
pub struct LightSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub rgb: [f64; 3],
}

impl LightSpec {
    fn direction(&self) -> [f64; 3] {
        let a = self.azimuth_deg.to_radians();
        let e = self.elevation_deg.to_radians();
        [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
    }
}

/// Physical constants of the simulated sensor.
#[derive(Debug, Clone)]
pub struct SensorParams {
    /// Peak indentation depth per newton of normal force, mm/N.
    pub k_gel_mm_per_n: f64,
    /// Lateral gel displacement per newton of shear force, px/N.
    pub k_shear_px_per_n: f64,
    /// Gaussian smoothing of the indentation profile, px.
    pub sigma_profile_px: f64,
    /// Depth-to-surface-slope conversion for shading, px/mm.
    pub slope_gain_px_per_mm: f64,
    /// Largest renderable normal force, N.
    pub fz_max_n: f64,
    /// Largest renderable shear magnitude per axis, N.
    pub shear_max_n: f64,
    pub lights: [LightSpec; 3],
    /// Seeds the background texture.
    pub background_seed: u64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            k_gel_mm_per_n: 0.15,
            k_shear_px_per_n: 1.5,
            sigma_profile_px: 3.0,
            slope_gain_px_per_mm: 4.0,
            fz_max_n: 10.0,
            shear_max_n: 4.0,
            // Per-channel intensity columns sum to 0.42, so the darkest
            // possible shading (every light shadowed) stays above the
            // background floor and the clamp in `shade` never engages for
            // in-range forces. Out-of-gamut clamping would break the
            // translation equivariance the sampler evaluation relies on.
            lights: [
                LightSpec { azimuth_deg: 0.0, elevation_deg: 55.0, rgb: [0.32, 0.05, 0.04] },
                LightSpec { azimuth_deg: 120.0, elevation_deg: 55.0, rgb: [0.05, 0.32, 0.06] },
                LightSpec { azimuth_deg: 240.0, elevation_deg: 55.0, rgb: [0.05, 0.05, 0.32] },
            ],
            background_seed: 0,
        }
    }
}

/// 1D squared-distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = -EDT_INF;
    z[1] = EDT_INF;
    let sep = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = sep(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = sep(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = EDT_INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance to the nearest off-mask pixel (or the frame
/// border), zero outside the mask.
pub fn edt_squared(mask: &ContactMask) -> Array2<f64> {
    let (h, w) = (mask.height(), mask.width());
    // Pad with a ring of zeros: the border acts as "outside".
    let (ph, pw) = (h + 2, w + 2);
    let mut g = Array2::zeros((ph, pw));
    for y in 0..h {
        for x in 0..w {
            g[[y + 1, x + 1]] = if mask.get(x, y) > 0 { EDT_INF } else { 0.0 };
        }
    }
    // Columns, then rows.
    let mut col = vec![0.0; ph];
    let mut out_col = vec![0.0; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = g[[y, x]];
        }
        dt1d(&col, &mut out_col);
        for y in 0..ph {
            g[[y, x]] = out_col[y];
        }
    }
    let mut row = vec![0.0; pw];
    let mut out_row = vec![0.0; pw];
    let mut result = Array2::zeros((h, w));
    for y in 0..ph {
        for x in 0..pw {
            row[x] = g[[y, x]];
        }
        dt1d(&row, &mut out_row);
        if y >= 1 && y <= h {
            for x in 1..=w {
                result[[y - 1, x - 1]] = out_row[x];
            }
        }
    }
    result
}

/// Separable Gaussian blur with zero padding, kernel truncated at 3 sigma.
pub fn gaussian_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    let mut sum = 0.0;
    for i in -r..=r {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, i) in (-r..=r).enumerate() {
                let xx = x as i64 + i;
                if xx >= 0 && (xx as usize) < w {
                    acc += kernel[ki] * src[[y, xx as usize]];
                }
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, i) in (-r..=r).enumerate() {
                let yy = y as i64 + i;
                if yy >= 0 && (yy as usize) < h {
                    acc += kernel[ki] * tmp[[yy as usize, x]];
                }
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Bilinear sample with zero outside the array.
fn sample_bilinear(a: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = (a.shape()[0] as i64, a.shape()[1] as i64);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xi = x0 as i64 + dx;
            let yi = y0 as i64 + dy;
            if xi >= 0 && xi < w && yi >= 0 && yi < h {
                acc += wy * wx * a[[yi as usize, xi as usize]];
            }
        }
    }
    acc
}

/// Deterministic background texture: a per-channel base level plus three
/// low-frequency sinusoidal octaves, all drawn from `background_seed`.
/// Mean intensity stays well inside [0.2, 0.8].
pub fn render_background(params: &SensorParams, h: usize, w: usize) -> BackgroundImage {
    let mut rng = tagged_rng(params.background_seed, "sensor.background", 0);
    let mut base = [0.0f64; 3];
    for b in &mut base {
        *b = rng.random_range(0.42..0.52);
    }
    let amps = [0.035, 0.022, 0.013];
    let mut octaves = Vec::new();
    for &amp in &amps {
        let fx = rng.random_range(1..=4) as f64;
        let fy = rng.random_range(1..=4) as f64;
        let mut phase = [0.0f64; 3];
        for p in &mut phase {
            *p = rng.random_range(0.0..std::f64::consts::TAU);
        }
        octaves.push((amp, fx, fy, phase));
    }
    let mut img = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = base[c];
                for (amp, fx, fy, phase) in &octaves {
                    let t = std::f64::consts::TAU
                        * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                        + phase[c];
                    v += amp * t.sin();
                }
                img[[y, x, c]] = v;
            }
        }
    }
    BackgroundImage(TactileImage::from_f64(&img))
}

/// Stateless renderer with the background cached.
pub struct Renderer {
    params: SensorParams,
    h: usize,
    w: usize,
    background: BackgroundImage,
    background_f: Array3<f64>,
    light_dirs: [[f64; 3]; 3],
}

impl Renderer {
    pub fn new(params: SensorParams, h: usize, w: usize) -> Self {
        let background = render_background(&params, h, w);
        let background_f = background.image().to_f64();
        let light_dirs = [
            params.lights[0].direction(),
            params.lights[1].direction(),
            params.lights[2].direction(),
        ];
        Self { params, h, w, background, background_f, light_dirs }
    }

    pub fn params(&self) -> &SensorParams {
        &self.params
    }

    pub fn background(&self) -> &BackgroundImage {
        &self.background
    }

    /// Indentation depth field for a contact, in millimetres.
    pub fn depth_field(&self, mask: &ContactMask, force: ForceVector) -> Result<HeightMap> {
        self.check_force(force)?;
        if force.fz == 0.0 {
            return Ok(HeightMap::zeros(self.h, self.w));
        }
        if mask.is_empty() {
            return Err(CoreError::InconsistentContact);
        }
        let profile = {
            let sq = edt_squared(mask);
            let dist = sq.mapv(f64::sqrt);
            let smooth = gaussian_blur(&dist, self.params.sigma_profile_px);
            let peak = smooth.iter().cloned().fold(0.0, f64::max);
            smooth.mapv(|v| v / peak)
        };
        let depth = profile.mapv(|v| v * self.params.k_gel_mm_per_n * force.fz);

        // Shear drags the gel surface sideways; the imprint follows.
        let sx = self.params.k_shear_px_per_n * force.fx;
        let sy = self.params.k_shear_px_per_n * force.fy;
        let mask_f = mask.to_f64();
        let mut shifted = Array2::zeros((self.h, self.w));
        for y in 0..self.h {
            for x in 0..self.w {
                let cover = sample_bilinear(&mask_f, x as f64 - sx, y as f64 - sy);
                if cover >= 0.5 {
                    shifted[[y, x]] = sample_bilinear(&depth, x as f64 - sx, y as f64 - sy);
                }
            }
        }
        Ok(HeightMap::new(shifted))
    }

    /// Renders a contact frame plus its ground-truth depth map.
    pub fn render(&self, mask: &ContactMask, force: ForceVector) -> Result<(TactileImage, HeightMap)> {
        if mask.height() != self.h || mask.width() != self.w {
            return Err(CoreError::ShapeMismatch {
                what: "render mask".into(),
                left_w: mask.width(),
                left_h: mask.height(),
                right_w: self.w,
                right_h: self.h,
            });
        }
        self.check_force(force)?;
        if force.fz == 0.0 {
            return Ok((self.background.image().clone(), HeightMap::zeros(self.h, self.w)));
        }
        let height = self.depth_field(mask, force)?;
        let image = self.shade(&height);
        Ok((image, height))
    }

    fn check_force(&self, force: ForceVector) -> Result<()> {
        if !(0.0..=self.params.fz_max_n).contains(&force.fz) {
            return Err(CoreError::ForceOutOfRange {
                fz: force.fz,
                min: 0.0,
                max: self.params.fz_max_n,
            });
        }
        if force.fx.abs() > self.params.shear_max_n || force.fy.abs() > self.params.shear_max_n {
            return Err(CoreError::Invalid(format!(
                "shear ({}, {}) N exceeds +/-{} N",
                force.fx, force.fy, self.params.shear_max_n
            )));
        }
        Ok(())
    }

    /// Lambertian shading of the depth field added onto the background.
    /// Flat regions shade to exactly zero, so the output there re-quantizes
    /// to the background bit-for-bit.
    fn shade(&self, height: &HeightMap) -> TactileImage {
        let z = height.depth_mm().mapv(|v| v * self.params.slope_gain_px_per_mm);
        let (h, w) = (self.h, self.w);
        let mut img = self.background_f.clone();
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                let ym = y.saturating_sub(1);
                let yp = (y + 1).min(h - 1);
                let gx = (z[[y, xp]] - z[[y, xm]]) * 0.5;
                let gy = (z[[yp, x]] - z[[ym, x]]) * 0.5;
                if gx == 0.0 && gy == 0.0 && z[[y, x]] == 0.0 {
                    continue;
                }
                let inv_norm = 1.0 / (1.0 + gx * gx + gy * gy).sqrt();
                for (light, dir) in self.params.lights.iter().zip(&self.light_dirs) {
                    let ndotl = (-gx * dir[0] - gy * dir[1] + dir[2]) * inv_norm;
                    let flat = dir[2];
                    let delta = ndotl.max(0.0) - flat.max(0.0);
                    for c in 0..3 {
                        img[[y, x, c]] += light.rgb[c] * delta;
                    }
                }
            }
        }
        TactileImage::from_f64(&img)
    }
}

/// Contact-shape prototypes used by the synthetic corpus. All are defined on
/// a 64px reference frame and scale with the smaller image dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskPrototype {
    /// Thin cylinder lying across the gel (two-fold symmetric).
    CylinderThin,
    /// Medium cylinder (two-fold symmetric).
    CylinderMid,
    /// Wide cylinder (two-fold symmetric).
    CylinderWide,
    /// Equal-armed cross (four-fold symmetric).
    Cross,
    /// Sphere: a disc, rotation-invariant.
    Sphere,
    /// T-shaped profile, no rotational symmetry.
    Tee,
}

impl MaskPrototype {
    pub const ALL: [MaskPrototype; 6] = [
        MaskPrototype::CylinderThin,
        MaskPrototype::CylinderMid,
        MaskPrototype::CylinderWide,
        MaskPrototype::Cross,
        MaskPrototype::Sphere,
        MaskPrototype::Tee,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            MaskPrototype::CylinderThin => "cyl_thin",
            MaskPrototype::CylinderMid => "cyl_mid",
            MaskPrototype::CylinderWide => "cyl_wide",
            MaskPrototype::Cross => "cross",
            MaskPrototype::Sphere => "sphere",
            MaskPrototype::Tee => "tee",
        }
    }

    pub fn from_id(id: &str) -> Option<MaskPrototype> {
        Self::ALL.iter().copied().find(|p| p.id() == id)
    }

    pub fn symmetry(&self) -> ObjectSymmetry {
        match self {
            MaskPrototype::CylinderThin | MaskPrototype::CylinderMid | MaskPrototype::CylinderWide => {
                ObjectSymmetry::TWO_FOLD
            }
            MaskPrototype::Cross => ObjectSymmetry::FOUR_FOLD,
            MaskPrototype::Sphere => ObjectSymmetry::ROTATION_INVARIANT,
            MaskPrototype::Tee => ObjectSymmetry::ASYMMETRIC,
        }
    }

    /// Renders the prototype at its canonical pose (centred, angle 0).
    pub fn render(&self, h: usize, w: usize) -> ContactMask {
        let scale = h.min(w) as f64 / 64.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        // (segment endpoints, radius) in 64px reference units.
        let capsules: Vec<([f64; 2], [f64; 2], f64)> = match self {
            MaskPrototype::CylinderThin => vec![([-15.0, 0.0], [15.0, 0.0], 3.5)],
            MaskPrototype::CylinderMid => vec![([-15.0, 0.0], [15.0, 0.0], 5.5)],
            MaskPrototype::CylinderWide => vec![([-13.0, 0.0], [13.0, 0.0], 7.5)],
            MaskPrototype::Cross => vec![
                ([-15.0, 0.0], [15.0, 0.0], 4.5),
                ([0.0, -15.0], [0.0, 15.0], 4.5),
            ],
            MaskPrototype::Sphere => vec![([0.0, 0.0], [0.0, 0.0], 9.0)],
            MaskPrototype::Tee => vec![
                ([-13.0, -7.0], [13.0, -7.0], 4.0),
                ([0.0, -7.0], [0.0, 9.0], 4.0),
            ],
        };
        let mut m = ContactMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let px = (x as f64 - cx) / scale;
                let py = (y as f64 - cy) / scale;
                for (a, b, r) in &capsules {
                    if dist_to_segment(px, py, a, b) <= *r {
                        m.set(x, y, 1);
                        break;
                    }
                }
            }
        }
        m
    }
}

fn dist_to_segment(px: f64, py: f64, a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (px - a[0], py - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 { 0.0 } else { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Which rotation angles the position sampler may draw.
#[derive(Debug, Clone)]
pub enum AngleSet {
    /// Any whole degree in [0, 360).
    Uniform,
    /// A fixed list of allowed angles.
    Choices(Vec<i32>),
}

/// One object in a synthetic corpus.
#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub id: String,
    pub prototype: MaskPrototype,
}

impl ObjectSpec {
    pub fn of(prototype: MaskPrototype) -> Self {
        Self { id: prototype.id().to_string(), prototype }
    }
}

/// Parameters for building a synthetic corpus on disk.
#[derive(Debug, Clone)]
pub struct SynthDatasetSpec {
    pub sensor: SensorConfig,
    pub params: SensorParams,
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    /// Distinct contact positions per object, per split.
    pub train_positions: usize,
    pub val_positions: usize,
    pub test_positions: usize,
    /// Frames (force draws) per position.
    pub frames_per_position: usize,
    pub fz_range: (f64, f64),
    /// Shear per axis is drawn from [-shear_max, shear_max] N.
    pub shear_max: f64,
    /// Translations are drawn from [-max_translation, max_translation] px.
    pub max_translation: i32,
    pub angles: AngleSet,
    /// Extra zero-force frames per object (train split).
    pub no_contact_frames: usize,
}

impl SynthDatasetSpec {
    pub fn small(seed: u64) -> Self {
        Self {
            sensor: SensorConfig { h: 64, w: 64, mm_per_px: 0.05 },
            params: SensorParams::default(),
            seed,
            objects: MaskPrototype::ALL.iter().map(|p| ObjectSpec::of(*p)).collect(),
            train_positions: 8,
            val_positions: 2,
            test_positions: 2,
            frames_per_position: 4,
            fz_range: (1.0, 10.0),
            shear_max: 2.0,
            max_translation: 12,
            angles: AngleSet::Uniform,
            no_contact_frames: 0,
        }
    }
}

struct PlacedPosition {
    mask: ContactMask,
    pose: ContactPose,
    split: Split,
    index: usize,
}

/// Renders a full corpus to `dir` (backgrounds, masks, frames, depth maps)
/// and writes `manifest.json`. Deterministic in the spec.
pub fn build_synthetic_dataset(spec: &SynthDatasetSpec, dir: &Path) -> Result<Manifest> {
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source: std::io::Error| CoreError::Io { path: p.clone(), source }
    };
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let heights_dir = dir.join("heights");
    for d in [dir, &images_dir, &masks_dir, &heights_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let (h, w) = (spec.sensor.h, spec.sensor.w);
    let renderer = Renderer::new(spec.params.clone(), h, w);
    renderer.background().image().save_png(&dir.join("background.png"))?;

    let mut manifest = Manifest::new(spec.sensor, spec.seed, dir.to_path_buf());
    for obj in &spec.objects {
        manifest
            .objects
            .insert(obj.id.clone(), ObjectInfo { symmetry_deg: obj.prototype.symmetry().period_deg });
    }

    let mut zero_assets: Option<(String, String)> = None;

    for obj in &spec.objects {
        let base_mask = obj.prototype.render(h, w);
        let base_area = base_mask.area();
        let (bx, by) = centroid_exact(&base_mask)?;
        let base_pose = ContactPose::new(bx, by, 0.0);
        let sym = obj.prototype.symmetry();

        let positions = place_positions(spec, obj, &base_mask, base_area, &base_pose, sym)?;
        for pos in &positions {
            let mask_rel = format!("masks/{}_p{:03}.png", obj.id, pos.index);
            pos.mask.save_png(&dir.join(&mask_rel))?;
            let mut force_rng = tagged_rng(
                spec.seed,
                "synth.force",
                fnv1a64(obj.id.as_bytes()) ^ splitmix64(pos.index as u64),
            );
            for k in 0..spec.frames_per_position {
                let force = ForceVector::new(
                    force_rng.random_range(-spec.shear_max..=spec.shear_max),
                    force_rng.random_range(-spec.shear_max..=spec.shear_max),
                    force_rng.random_range(spec.fz_range.0..=spec.fz_range.1),
                );
                let (image, height) = renderer.render(&pos.mask, force)?;
                let id = format!("{}_p{:03}_f{}", obj.id, pos.index, k);
                let image_rel = format!("images/{id}.png");
                let height_rel = format!("heights/{id}.png");
                image.save_png(&dir.join(&image_rel))?;
                height.save_png(&dir.join(&height_rel), manifest.height_scale_mm)?;
                manifest.push_validated(SampleRecord {
                    id,
                    image: image_rel,
                    background: "background.png".into(),
                    mask: mask_rel.clone(),
                    height: Some(height_rel),
                    force,
                    pose: pos.pose,
                    object_id: obj.id.clone(),
                    split: pos.split,
                    provenance: Provenance::Synthetic,
                })?;
            }
        }

        if spec.no_contact_frames > 0 {
            let (mask_rel, height_rel) = match &zero_assets {
                Some(assets) => assets.clone(),
                None => {
                    let mask_rel = "masks/empty.png".to_string();
                    let height_rel = "heights/zero.png".to_string();
                    ContactMask::zeros(h, w).save_png(&dir.join(&mask_rel))?;
                    HeightMap::zeros(h, w).save_png(&dir.join(&height_rel), manifest.height_scale_mm)?;
                    renderer.background().image().save_png(&dir.join("images/no_contact.png"))?;
                    zero_assets = Some((mask_rel.clone(), height_rel.clone()));
                    (mask_rel, height_rel)
                }
            };
            let (cx, cy) = crate::mask::frame_centre(w, h);
            for k in 0..spec.no_contact_frames {
                manifest.push_validated(SampleRecord {
                    id: format!("{}_nc{}", obj.id, k),
                    image: "images/no_contact.png".into(),
                    background: "background.png".into(),
                    mask: mask_rel.clone(),
                    height: Some(height_rel.clone()),
                    force: ForceVector::ZERO,
                    pose: ContactPose::new(cx, cy, 0.0),
                    object_id: obj.id.clone(),
                    split: Split::Train,
                    provenance: Provenance::Synthetic,
                })?;
            }
        }
    }

    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Draws distinct, fully-in-frame placements for one object. Placements that
/// clip the frame (area loss > 10%) are redrawn, so the draw sequence, and
/// with it the whole corpus, is a pure function of the spec.
fn place_positions(
    spec: &SynthDatasetSpec,
    obj: &ObjectSpec,
    base_mask: &ContactMask,
    base_area: usize,
    base_pose: &ContactPose,
    sym: ObjectSymmetry,
) -> Result<Vec<PlacedPosition>> {
    let total = spec.train_positions + spec.val_positions + spec.test_positions;
    let mut rng = tagged_rng(spec.seed, "synth.pos", fnv1a64(obj.id.as_bytes()));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while out.len() < total {
        attempts += 1;
        if attempts > 1000 * total.max(1) {
            return Err(CoreError::Invalid(format!(
                "could not place {} distinct positions for {}",
                total, obj.id
            )));
        }
        let dx = rng.random_range(-spec.max_translation..=spec.max_translation);
        let dy = rng.random_range(-spec.max_translation..=spec.max_translation);
        let dtheta = match &spec.angles {
            AngleSet::Uniform => rng.random_range(0..360),
            AngleSet::Choices(v) => v[rng.random_range(0..v.len())],
        };
        let t = MaskTransform::new(dx, dy, dtheta);
        if !seen.insert((dx, dy, dtheta)) {
            continue;
        }
        let Ok(pose) = pose_from_transform(base_pose, &t, sym, spec.sensor.w, spec.sensor.h) else {
            continue;
        };
        let mask = transform_mask(base_mask, &t)?;
        if (mask.area() as f64) < 0.9 * base_area as f64 {
            continue;
        }
        let index = out.len();
        let split = if index < spec.train_positions {
            Split::Train
        } else if index < spec.train_positions + spec.val_positions {
            Split::Val
        } else {
            Split::Test
        };
        out.push(PlacedPosition { mask, pose, split, index });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_edt_squared(mask: &ContactMask) -> Array2<f64> {
        let (h, w) = (mask.height(), mask.width());
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) == 0 {
                    continue;
                }
                let mut best = f64::INFINITY;
                // Off-mask pixels.
                for yy in 0..h {
                    for xx in 0..w {
                        if mask.get(xx, yy) == 0 {
                            let d = (x as f64 - xx as f64).powi(2) + (y as f64 - yy as f64).powi(2);
                            best = best.min(d);
                        }
                    }
                }
                // Frame border ring.
                let bx = (x as f64 + 1.0).min(w as f64 - x as f64);
                let by = (y as f64 + 1.0).min(h as f64 - y as f64);
                best = best.min(bx * bx).min(by * by);
                out[[y, x]] = best;
            }
        }
        out
    }

    #[test]
    fn edt_matches_brute_force() {
        for seed in 0..5u64 {
            let mut rng = tagged_rng(seed, "test.edt", 0);
            let mut m = ContactMask::zeros(16, 16);
            for y in 0..16 {
                for x in 0..16 {
                    if rng.random_range(0.0..1.0) < 0.45 {
                        m.set(x, y, 1);
                    }
                }
            }
            let fast = edt_squared(&m);
            let slow = brute_edt_squared(&m);
            for ((y, x), v) in fast.indexed_iter() {
                assert!(
                    (v - slow[[y, x]]).abs() < 1e-9,
                    "seed {seed} pixel ({x},{y}): {v} vs {}",
                    slow[[y, x]]
                );
            }
        }
    }

    #[test]
    fn blur_preserves_mass_away_from_borders() {
        let mut src = Array2::zeros((31, 31));
        src[[15, 15]] = 1.0;
        let out = gaussian_blur(&src, 3.0);
        let total: f64 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "mass {total}");
        // Symmetry of the point response.
        assert!((out[[15, 10]] - out[[15, 20]]).abs() < 1e-12);
        assert!((out[[10, 15]] - out[[20, 15]]).abs() < 1e-12);
    }

    #[test]
    fn zero_force_renders_the_background_exactly() {
        let r = Renderer::new(SensorParams::default(), 64, 64);
        let mask = MaskPrototype::Sphere.render(64, 64);
        let (img, height) = r.render(&mask, ForceVector::ZERO).unwrap();
        assert_eq!(&img, r.background().image());
        assert_eq!(height.max_depth_mm(), 0.0);
    }

    #[test]
    fn flat_area_far_from_contact_stays_background() {
        let r = Renderer::new(SensorParams::default(), 64, 64);
        let mask = MaskPrototype::Sphere.render(64, 64);
        let (img, _) = r.render(&mask, ForceVector::new(0.0, 0.0, 5.0)).unwrap();
        // Corner pixels are far outside the blurred footprint.
        let bg = r.background().image();
        for (x, y) in [(0, 0), (63, 0), (0, 63), (63, 63)] {
            for c in 0..3 {
                assert_eq!(img.data()[[y, x, c]], bg.data()[[y, x, c]]);
            }
        }
    }

    #[test]
    fn depth_peak_scales_linearly_with_force() {
        let r = Renderer::new(SensorParams::default(), 64, 64);
        let mask = MaskPrototype::CylinderMid.render(64, 64);
        let d2 = r.depth_field(&mask, ForceVector::new(0.0, 0.0, 2.0)).unwrap();
        let d8 = r.depth_field(&mask, ForceVector::new(0.0, 0.0, 8.0)).unwrap();
        assert!((d8.max_depth_mm() - 4.0 * d2.max_depth_mm()).abs() < 1e-9);
        assert!((d2.max_depth_mm() - 0.15 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn mean_deviation_is_strictly_force_monotone() {
        let r = Renderer::new(SensorParams::default(), 64, 64);
        for proto in MaskPrototype::ALL {
            let mask = proto.render(64, 64);
            for shear in [(0.0, 0.0), (1.5, -1.0)] {
                let mut prev = -1.0;
                for fz in [2.0, 5.0, 8.0] {
                    let (img, _) = r.render(&mask, ForceVector::new(shear.0, shear.1, fz)).unwrap();
                    let dev = img.mean_abs_diff(r.background().image());
                    assert!(
                        dev > prev,
                        "{}: deviation not monotone at fz={fz} (prev {prev}, now {dev})",
                        proto.id()
                    );
                    prev = dev;
                }
            }
        }
    }

    #[test]
    fn rendering_is_shift_equivariant_for_interior_contacts() {
        use crate::image::subtract_background;
        let r = Renderer::new(SensorParams::default(), 64, 64);
        let mask = MaskPrototype::Cross.render(64, 64);
        let t = MaskTransform::new(6, -4, 0);
        let shifted = transform_mask(&mask, &t).unwrap();
        let force = ForceVector::new(0.8, -0.4, 6.0);
        let (img_a, _) = r.render(&mask, force).unwrap();
        let (img_b, _) = r.render(&shifted, force).unwrap();
        let da = subtract_background(&img_a, r.background()).unwrap();
        let db = subtract_background(&img_b, r.background()).unwrap();
        // Difference frames are equal up to one quantization level after the
        // same shift.
        for y in 0..64usize {
            for x in 0..64usize {
                let (sx, sy) = (x as i64 - 6, y as i64 + 4);
                if !(0..64).contains(&sx) || !(0..64).contains(&sy) {
                    continue;
                }
                for c in 0..3 {
                    let a = da.data()[[sy as usize, sx as usize, c]] as i32;
                    let b = db.data()[[y, x, c]] as i32;
                    assert!((a - b).abs() <= 1, "({x},{y},{c}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn shear_moves_the_imprint_centroid() {
        let r = Renderer::new(SensorParams::default(), 64, 64);
        let mask = MaskPrototype::Sphere.render(64, 64);
        let d0 = r.depth_field(&mask, ForceVector::new(0.0, 0.0, 5.0)).unwrap();
        let d1 = r.depth_field(&mask, ForceVector::new(2.0, 0.0, 5.0)).unwrap();
        let c0 = centroid_exact(&d0.support(1e-6)).unwrap();
        let c1 = centroid_exact(&d1.support(1e-6)).unwrap();
        // k_shear = 1.5 px/N, fx = 2 N -> 3 px shift along +x.
        assert!((c1.0 - c0.0 - 3.0).abs() <= 0.75, "dx = {}", c1.0 - c0.0);
        assert!((c1.1 - c0.1).abs() <= 0.5);
    }

    #[test]
    fn prototypes_have_their_declared_symmetry() {
        for (proto, angle) in [
            (MaskPrototype::CylinderThin, 180),
            (MaskPrototype::CylinderMid, 180),
            (MaskPrototype::CylinderWide, 180),
            (MaskPrototype::Cross, 90),
            (MaskPrototype::Sphere, 90),
        ] {
            let m = proto.render(64, 64);
            let rot = transform_mask(&m, &MaskTransform::new(0, 0, angle)).unwrap();
            assert_eq!(rot, m, "{} not invariant under {angle} deg", proto.id());
        }
        // The tee is genuinely asymmetric.
        let tee = MaskPrototype::Tee.render(64, 64);
        let rot = transform_mask(&tee, &MaskTransform::new(0, 0, 180)).unwrap();
        assert_ne!(rot, tee);
    }

    #[test]
    fn out_of_range_forces_are_rejected() {
        let r = Renderer::new(SensorParams::default(), 32, 32);
        let mask = MaskPrototype::Sphere.render(32, 32);
        assert!(r.render(&mask, ForceVector::new(0.0, 0.0, 11.0)).is_err());
        assert!(r.render(&mask, ForceVector::new(5.0, 0.0, 5.0)).is_err());
        assert!(r.render(&ContactMask::zeros(32, 32), ForceVector::new(0.0, 0.0, 3.0)).is_err());
    }

    #[test]
    fn dataset_builder_is_deterministic_and_loadable() {
        let mut spec = SynthDatasetSpec::small(11);
        spec.objects = vec![ObjectSpec::of(MaskPrototype::CylinderMid), ObjectSpec::of(MaskPrototype::Tee)];
        spec.train_positions = 3;
        spec.val_positions = 1;
        spec.test_positions = 1;
        spec.frames_per_position = 2;
        spec.no_contact_frames = 1;
        let base = std::env::temp_dir().join("tacgen_synth_builder");
        let dir_a = base.join("a");
        let dir_b = base.join("b");
        for d in [&dir_a, &dir_b] {
            if d.exists() {
                std::fs::remove_dir_all(d).unwrap();
            }
        }
        let m_a = build_synthetic_dataset(&spec, &dir_a).unwrap();
        let _m_b = build_synthetic_dataset(&spec, &dir_b).unwrap();
        assert_eq!(
            std::fs::read(dir_a.join("manifest.json")).unwrap(),
            std::fs::read(dir_b.join("manifest.json")).unwrap()
        );
        // 2 objects * (5 positions * 2 frames + 1 no-contact).
        assert_eq!(m_a.samples.len(), 22);
        // Full strict reload.
        let loaded = Manifest::load(&dir_a.join("manifest.json")).unwrap();
        assert_eq!(loaded.samples.len(), 22);
        assert_eq!(loaded.split_samples(Split::Val).count(), 4);
        assert_eq!(loaded.split_samples(Split::Test).count(), 4);
        // Pose labels sit on the mask centroid (within a pixel).
        for s in loaded.split_samples(Split::Train) {
            if s.force.fz == 0.0 {
                continue;
            }
            let mask = loaded.load_mask(s).unwrap();
            let (cx, cy) = centroid_exact(&mask).unwrap();
            assert!((cx - s.pose.cx).abs() <= 1.0 && (cy - s.pose.cy).abs() <= 1.0, "{}", s.id);
        }
    }
}
