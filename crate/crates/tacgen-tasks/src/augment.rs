//! Dataset synthesis from a single reference sample: a force sweep through
//! the stage-1 generator, or a full force-by-position grid through the
//! mask-conditioned branch. Labels come from the conditioning inputs, never
//! from the generated pixels, so label bookkeeping is exact by construction.

use std::path::Path;

use tacgen_core::mask::transform_mask;
use tacgen_core::pose::pose_from_transform;
use tacgen_core::synth::AngleSet;
use tacgen_core::{
    ForceVector, Manifest, MaskTransform, Provenance, SampleRecord, Split,
};
use tacgen_core::rng::tagged_rng;
use tacgen_diffusion::{generate, generate_positioned, Codec, ControlNetWeights, GeneratorWeights};

use crate::error::{Result, TaskError};

/// Sampling settings shared by both augmentation modes.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub sample_steps: usize,
    pub eta: f64,
    /// Accepted normal-force band; targets outside it are rejected per item.
    pub fz_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { sample_steps: 50, eta: 0.0, fz_range: (1.0, 10.0) }
    }
}

impl AugmentConfig {
    /// Narrower force band used when the mask-conditioned stage is active.
    pub fn positioned_profile() -> Self {
        Self { fz_range: (4.0, 10.0), ..Self::default() }
    }
}

/// What an augmentation run produced and what it had to drop.
#[derive(Debug)]
pub struct AugmentReport {
    pub manifest: Manifest,
    /// Target forces outside the accepted band.
    pub rejected_forces: usize,
    /// Transforms whose centre left the frame.
    pub skipped_transforms: usize,
}

/// Draws `n_positions` distinct `(dx, dy, dtheta)` transforms uniformly
/// without replacement from the integer grid
/// `[-max_dx, max_dx] x [-max_dy, max_dy] x angles`. Passing `n_positions`
/// equal to the grid size enumerates the whole grid.
pub fn sample_transform_grid(
    n_positions: usize,
    max_dx: usize,
    max_dy: usize,
    angles: &AngleSet,
    seed: u64,
) -> Result<Vec<MaskTransform>> {
    let angle_list: Vec<i32> = match angles {
        AngleSet::Uniform => (0..360).collect(),
        AngleSet::Choices(list) => {
            let mut canon: Vec<i32> = list.iter().map(|a| a.rem_euclid(360)).collect();
            canon.sort_unstable();
            canon.dedup();
            canon
        }
    };
    if angle_list.is_empty() {
        return Err(TaskError::Invalid("angle set is empty".into()));
    }
    let nx = 2 * max_dx + 1;
    let ny = 2 * max_dy + 1;
    let grid = nx * ny * angle_list.len();
    if n_positions > grid {
        return Err(TaskError::GridTooSmall { grid, requested: n_positions });
    }
    let mut indices: Vec<usize> = (0..grid).collect();
    let mut rng = tagged_rng(seed, "augment.grid", 0);
    // Partial Fisher-Yates: only the first n_positions slots are needed.
    for i in 0..n_positions {
        let j = i + rand::Rng::random_range(&mut rng, 0..grid - i);
        indices.swap(i, j);
    }
    Ok(indices[..n_positions]
        .iter()
        .map(|&idx| {
            let a = idx % angle_list.len();
            let rest = idx / angle_list.len();
            let iy = rest % ny;
            let ix = rest / ny;
            MaskTransform::new(
                ix as i32 - max_dx as i32,
                iy as i32 - max_dy as i32,
                angle_list[a],
            )
        })
        .collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io { path: path.to_path_buf(), source }
}

struct AugmentTarget<'a> {
    manifest: Manifest,
    images_dir: std::path::PathBuf,
    masks_dir: std::path::PathBuf,
    out_dir: &'a Path,
}

/// Sets up the output directory skeleton and a manifest that shares the
/// source's sensor and the reference's object entry.
fn prepare_target<'a>(
    src: &Manifest,
    object_id: &str,
    out_dir: &'a Path,
    seed: u64,
) -> Result<AugmentTarget<'a>> {
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    for d in [out_dir, &images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut manifest = Manifest::new(src.sensor, seed, out_dir.to_path_buf());
    if let Some(info) = src.objects.get(object_id) {
        manifest.objects.insert(object_id.to_string(), *info);
    }
    Ok(AugmentTarget { manifest, images_dir, masks_dir, out_dir })
}

fn lookup<'a>(src: &'a Manifest, ref_id: &str) -> Result<&'a SampleRecord> {
    src.sample_by_id(ref_id).ok_or_else(|| TaskError::NoSuchSample { id: ref_id.to_string() })
}

/// One generated sample per in-band target force, at the reference's contact
/// position. Labels: force = target, pose = reference pose.
pub fn force_augment(
    src: &Manifest,
    ref_id: &str,
    target_forces: &[ForceVector],
    weights: &GeneratorWeights,
    codec: &Codec,
    config: &AugmentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<AugmentReport> {
    let record = lookup(src, ref_id)?;
    let image = src.load_image(record)?;
    let background = src.load_background(record)?;
    let mask = src.load_mask(record)?;
    let mut target = prepare_target(src, &record.object_id, out_dir, seed)?;

    background.image().save_png(&target.out_dir.join("background.png"))?;
    mask.save_png(&target.masks_dir.join("ref.png"))?;

    let mut rejected = 0usize;
    for (k, force) in target_forces.iter().enumerate() {
        if force.fz < config.fz_range.0 || force.fz > config.fz_range.1 {
            rejected += 1;
            continue;
        }
        let id = format!("{ref_id}.f{k:04}");
        let out = generate(
            weights,
            codec,
            &image,
            &background,
            record.force,
            *force,
            config.sample_steps,
            config.eta,
            seed,
            &format!("aug.force.{k}"),
        )?;
        out.save_png(&target.images_dir.join(format!("{id}.png")))?;
        target.manifest.push_validated(SampleRecord {
            id,
            image: format!("images/{ref_id}.f{k:04}.png"),
            background: "background.png".into(),
            mask: "masks/ref.png".into(),
            height: None,
            force: *force,
            pose: record.pose,
            object_id: record.object_id.clone(),
            split: Split::Train,
            provenance: Provenance::Generated,
        })?;
    }
    target.manifest.save(&out_dir.join("manifest.json"))?;
    Ok(AugmentReport {
        manifest: target.manifest,
        rejected_forces: rejected,
        skipped_transforms: 0,
    })
}

/// The full grid: every in-band force at every in-frame transform of the
/// reference contact. Pose labels follow the transform in closed form; the
/// transformed mask is stored as each record's mask.
#[allow(clippy::too_many_arguments)]
pub fn full_augment(
    src: &Manifest,
    ref_id: &str,
    forces: &[ForceVector],
    transforms: &[MaskTransform],
    base: &GeneratorWeights,
    cn: &ControlNetWeights,
    codec: &Codec,
    config: &AugmentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<AugmentReport> {
    let record = lookup(src, ref_id)?;
    let image = src.load_image(record)?;
    let background = src.load_background(record)?;
    let mask = src.load_mask(record)?;
    let sym = src.symmetry_of(&record.object_id);
    let (h, w) = (src.sensor.h, src.sensor.w);
    let mut target = prepare_target(src, &record.object_id, out_dir, seed)?;
    background.image().save_png(&target.out_dir.join("background.png"))?;

    let in_band: Vec<(usize, ForceVector)> = forces
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, f)| f.fz >= config.fz_range.0 && f.fz <= config.fz_range.1)
        .collect();
    let rejected = forces.len() - in_band.len();

    let mut skipped = 0usize;
    for (j, t) in transforms.iter().enumerate() {
        let pose = match pose_from_transform(&record.pose, t, sym, w, h) {
            Ok(p) => p,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let moved = transform_mask(&mask, t)?;
        let mask_rel = format!("masks/t{j:05}.png");
        moved.save_png(&target.out_dir.join(&mask_rel))?;
        for &(k, force) in &in_band {
            let id = format!("{ref_id}.p{j:05}.f{k:02}");
            let out = generate_positioned(
                base,
                cn,
                codec,
                &image,
                &background,
                record.force,
                force,
                &moved,
                config.sample_steps,
                config.eta,
                seed,
                &format!("aug.full.{j}.{k}"),
            )?;
            out.save_png(&target.images_dir.join(format!("{id}.png")))?;
            target.manifest.push_validated(SampleRecord {
                id,
                image: format!("images/{ref_id}.p{j:05}.f{k:02}.png"),
                background: "background.png".into(),
                mask: mask_rel.clone(),
                height: None,
                force,
                pose,
                object_id: record.object_id.clone(),
                split: Split::Train,
                provenance: Provenance::Generated,
            })?;
        }
    }
    target.manifest.save(&out_dir.join("manifest.json"))?;
    Ok(AugmentReport { manifest: target.manifest, rejected_forces: rejected, skipped_transforms: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn grid_enumeration_is_exact_and_duplicate_free() {
        let angles = AngleSet::Choices(vec![0, 90, 180, 270]);
        let full = sample_transform_grid(5 * 5 * 4, 2, 2, &angles, 7).unwrap();
        let set: BTreeSet<(i32, i32, i32)> =
            full.iter().map(|t| (t.dx, t.dy, t.dtheta)).collect();
        assert_eq!(set.len(), 100);
        for dx in -2..=2 {
            for dy in -2..=2 {
                for a in [0, 90, 180, 270] {
                    assert!(set.contains(&(dx, dy, a)));
                }
            }
        }
        assert!(matches!(
            sample_transform_grid(101, 2, 2, &angles, 7),
            Err(TaskError::GridTooSmall { grid: 100, requested: 101 })
        ));
    }

    #[test]
    fn angle_restriction_and_sampling_without_replacement() {
        let zero_only = sample_transform_grid(50, 10, 10, &AngleSet::Choices(vec![0]), 3).unwrap();
        assert_eq!(zero_only.len(), 50);
        assert!(zero_only.iter().all(|t| t.dtheta == 0));
        let wide = sample_transform_grid(5000, 40, 40, &AngleSet::Uniform, 3).unwrap();
        let set: BTreeSet<(i32, i32, i32)> = wide.iter().map(|t| (t.dx, t.dy, t.dtheta)).collect();
        assert_eq!(set.len(), 5000, "drawing without replacement leaves no duplicates");
        // Negative-degree choices are canonicalized into [0, 360).
        let canon = sample_transform_grid(9, 1, 1, &AngleSet::Choices(vec![-90]), 3).unwrap();
        assert!(canon.iter().all(|t| t.dtheta == 270));
    }

    #[test]
    fn grid_sampling_is_deterministic_in_the_seed() {
        let angles = AngleSet::Uniform;
        let a = sample_transform_grid(100, 12, 12, &angles, 11).unwrap();
        let b = sample_transform_grid(100, 12, 12, &angles, 11).unwrap();
        let c = sample_transform_grid(100, 12, 12, &angles, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
