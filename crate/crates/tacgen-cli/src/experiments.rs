//! Scripted end-to-end reproductions. Each experiment is a deterministic
//! pipeline over the stage functions with pinned sizes and writes one CSV
//! table (plus per-stage run directories) under its output directory.
//!
//! Two profiles exist. `desk` is the pinned full-size shape: 64x64 frames,
//! all six contact prototypes, 300 train positions per object, and the
//! generation models sized to finish in minutes-to-hours on one commodity
//! machine. `smoke` runs the identical pipeline at toy sizes in well under a
//! minute per experiment; it exists to check shapes and reproducibility, not
//! quality.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use serde_json::Value;
use tacgen_core::rng::tagged_rng;
use tacgen_core::{ForceVector, Manifest, SampleRecord, Split};
use tacgen_diffusion::{Codec, ControlNetWeights, GeneratorWeights, ScheduleConfig};
use tacgen_tasks::{
    eval_generation, force_mae, full_augment, load_task_items, pose_errors, train_classifier,
    train_force_estimator, train_pose_estimator, traditional_augment, traditional_count,
    ClassifierKind, TaskItem, TraditionalMode, VitConfig,
};

use crate::bench::{position_cases, run_benchmark, ModelUnderTest};
use crate::config::{
    AugmentCliConfig, BaselineConfig, BaselineKind, CodecCliConfig, DitSize, EstimatorCliConfig,
    ExperimentConfig, OptimSpec, Stage1Config, Stage2Config, SynthConfig,
};
use crate::error::{CliError, Result};
use crate::pipeline::{baseline_stage, codec_stage, stage1_stage, stage2_stage, synth_stage};
use crate::rundir::RunDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    Table1,
    Fig4,
    Fig5,
    Table2,
    Table3,
}

pub const EXPERIMENT_NAMES: [&str; 5] =
    ["table1-desk", "fig4-desk", "fig5-desk", "table2-desk", "table3-desk"];

impl ExperimentName {
    pub fn parse(s: &str) -> Result<ExperimentName> {
        match s {
            "table1-desk" => Ok(ExperimentName::Table1),
            "fig4-desk" => Ok(ExperimentName::Fig4),
            "fig5-desk" => Ok(ExperimentName::Fig5),
            "table2-desk" => Ok(ExperimentName::Table2),
            "table3-desk" => Ok(ExperimentName::Table3),
            other => Err(CliError::run(format!(
                "unknown experiment `{other}` (expected one of {})",
                EXPERIMENT_NAMES.join(", ")
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ExperimentName::Table1 => "table1-desk",
            ExperimentName::Fig4 => "fig4-desk",
            ExperimentName::Fig5 => "fig5-desk",
            ExperimentName::Table2 => "table2-desk",
            ExperimentName::Table3 => "table3-desk",
        }
    }
}

pub fn run_experiment(
    name: ExperimentName,
    cfg: &ExperimentConfig,
    tree: &Value,
    out: &Path,
) -> Result<()> {
    let run = RunDir::create(out, &format!("experiment {}", name.label()), cfg.seed, tree)?;
    let smoke = cfg.profile == "smoke";
    match name {
        ExperimentName::Table1 => table1(&run, cfg.seed, smoke),
        ExperimentName::Fig4 => fig4(&run, cfg.seed, smoke),
        ExperimentName::Fig5 => fig5(&run, cfg.seed, smoke),
        ExperimentName::Table2 => table2(&run, cfg.seed, smoke),
        ExperimentName::Table3 => table3(&run, cfg.seed, smoke),
    }
    .map_err(|e| CliError::run(format!("{}: {}", name.label(), e)))
}

fn sub_run<T: Serialize>(parent: &RunDir, name: &str, command: &str, seed: u64, cfg: &T) -> Result<RunDir> {
    let tree = serde_json::to_value(cfg).map_err(|e| CliError::run(e.to_string()))?;
    RunDir::create(&parent.file(name), command, seed, &tree)
}

// ---------------------------------------------------------------------------
// Profile pieces.

fn desk_dit() -> DitSize {
    DitSize { patch: 4, depth: 4, dim: 96, heads: 4 }
}

/// Smoke runs use the identity codec, so latents are 3x32x32 and an 8px
/// patch keeps the token count at 16.
fn smoke_dit() -> DitSize {
    DitSize { patch: 8, depth: 2, dim: 16, heads: 2 }
}

fn optim(steps: usize, batch: usize) -> OptimSpec {
    OptimSpec { steps, batch, lr_start: 3e-4, lr_end: 3e-5, weight_decay: 1e-4 }
}

fn data_profile(seed: u64, smoke: bool) -> SynthConfig {
    if smoke {
        SynthConfig {
            seed,
            h: 32,
            w: 32,
            mm_per_px: 0.1,
            objects: vec!["cyl_mid".into(), "cross".into()],
            train_positions: 6,
            val_positions: 2,
            test_positions: 2,
            frames_per_position: 3,
            max_translation: 6,
            ..SynthConfig::default()
        }
    } else {
        SynthConfig { seed, ..SynthConfig::default() }
    }
}

fn codec_profile(seed: u64, smoke: bool) -> CodecCliConfig {
    let mut cfg = CodecCliConfig { seed, ..CodecCliConfig::default() };
    if smoke {
        cfg.codec = tacgen_diffusion::CodecConfig::identity();
    }
    cfg
}

fn stage1_profile(seed: u64, smoke: bool) -> Stage1Config {
    if smoke {
        Stage1Config {
            seed,
            dit: smoke_dit(),
            schedule: ScheduleConfig { steps: 60, ..ScheduleConfig::default() },
            pairs: 50,
            identity_rate: 0.1,
            optim: optim(25, 4),
        }
    } else {
        Stage1Config {
            seed,
            dit: desk_dit(),
            schedule: ScheduleConfig::default(),
            pairs: 2000,
            identity_rate: 0.1,
            optim: optim(3000, 8),
        }
    }
}

fn stage2_profile(seed: u64, smoke: bool, exclude: Vec<String>) -> Stage2Config {
    if smoke {
        Stage2Config {
            seed,
            tuples: 50,
            same_position_rate: 0.15,
            exclude_objects: exclude,
            optim: optim(25, 4),
        }
    } else {
        Stage2Config {
            seed,
            tuples: 1500,
            same_position_rate: 0.15,
            exclude_objects: exclude,
            optim: optim(2500, 8),
        }
    }
}

fn baseline_profile(seed: u64, smoke: bool) -> BaselineConfig {
    let s1 = stage1_profile(seed, smoke);
    BaselineConfig {
        seed,
        dit: s1.dit,
        schedule: s1.schedule,
        tuples: if smoke { 50 } else { 1500 },
        same_position_rate: 0.15,
        sample_steps: if smoke { 4 } else { 25 },
        optim: s1.optim,
    }
}

fn estimator_profile(seed: u64, smoke: bool, input: usize) -> EstimatorCliConfig {
    let vit = if smoke {
        VitConfig { patch: 16, depth: 1, dim: 16, heads: 2 }
    } else if input >= 64 {
        VitConfig { patch: 16, depth: 2, dim: 48, heads: 4 }
    } else {
        VitConfig { patch: 8, depth: 2, dim: 48, heads: 4 }
    };
    EstimatorCliConfig {
        seed,
        steps: if smoke { 20 } else { 1200 },
        batch: 8,
        vit,
        ..EstimatorCliConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Shared helpers.

struct Stack {
    manifest: Manifest,
    codec: Codec,
    stage1: GeneratorWeights,
    control: Option<ControlNetWeights>,
}

/// data -> codec (gated) -> force stage -> optional control branch; each
/// stage snapshots its config into its own subdirectory.
fn build_stack(
    run: &RunDir,
    data: &SynthConfig,
    codec_cfg: &CodecCliConfig,
    s1: &Stage1Config,
    s2: Option<&Stage2Config>,
) -> Result<Stack> {
    let data_run = sub_run(run, "data", "synth-data", data.seed, data)?;
    let manifest = synth_stage(data, data_run.path())?;
    let codec_run = sub_run(run, "codec", "train-codec", codec_cfg.seed, codec_cfg)?;
    let codec = codec_stage(&manifest, codec_cfg, &codec_run)?;
    let s1_run = sub_run(run, "stage1", "train-stage1", s1.seed, s1)?;
    let stage1 = stage1_stage(&manifest, &codec, s1, &s1_run)?;
    let control = match s2 {
        None => None,
        Some(s2) => {
            let s2_run = sub_run(run, "control", "train-stage2", s2.seed, s2)?;
            Some(stage2_stage(&manifest, &codec, &stage1, s2, &s2_run)?)
        }
    };
    Ok(Stack { manifest, codec, stage1, control })
}

fn draw_forces(n: usize, fz: (f64, f64), shear: f64, seed: u64, tag: &str) -> Vec<ForceVector> {
    let mut rng = tagged_rng(seed, tag, 0);
    (0..n)
        .map(|_| {
            ForceVector::new(
                rng.random_range(-shear..=shear),
                rng.random_range(-shear..=shear),
                rng.random_range(fz.0..fz.1),
            )
        })
        .collect()
}

fn shuffled_items(items: &[TaskItem], seed: u64, tag: &str) -> Vec<TaskItem> {
    let mut v = items.to_vec();
    let mut rng = tagged_rng(seed, tag, 0);
    v.shuffle(&mut rng);
    v
}

fn per_class_subset(
    items: &[TaskItem],
    per_class: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<TaskItem>> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(it.object_id.as_str()).or_default().push(i);
    }
    let mut out = Vec::with_capacity(per_class * by_class.len());
    for (k, (class, mut idx)) in by_class.into_iter().enumerate() {
        if idx.len() < per_class {
            return Err(CliError::run(format!(
                "class `{class}` has {} items, need {per_class}",
                idx.len()
            )));
        }
        let mut rng = tagged_rng(seed, tag, k as u64);
        idx.shuffle(&mut rng);
        out.extend(idx[..per_class].iter().map(|&i| items[i].clone()));
    }
    Ok(out)
}

/// First train-split contact of the object, optionally requiring the normal
/// force to sit inside the positioned generation band.
fn reference_of<'a>(
    manifest: &'a Manifest,
    object: &str,
    min_fz: f64,
) -> Result<&'a SampleRecord> {
    manifest
        .split_samples(Split::Train)
        .find(|s| s.object_id == object && s.force.fz >= min_fz)
        .ok_or_else(|| {
            CliError::run(format!("object `{object}` has no train contact with fz >= {min_fz}"))
        })
}

/// Mask transforms whose composed pose stays in frame for this reference, so
/// a positioned pool has exactly `want` positions. Draws extra candidates
/// and filters against the pose oracle.
fn valid_transforms(
    manifest: &Manifest,
    reference: &SampleRecord,
    want: usize,
    max_dx: usize,
    max_dy: usize,
    seed: u64,
) -> Result<Vec<tacgen_core::MaskTransform>> {
    let sym = manifest.symmetry_of(&reference.object_id);
    let (h, w) = (manifest.sensor.h, manifest.sensor.w);
    let candidates = tacgen_tasks::sample_transform_grid(
        (want * 2).max(want + 8),
        max_dx,
        max_dy,
        &tacgen_core::synth::AngleSet::Uniform,
        seed,
    )
    .map_err(|e| CliError::run(e.to_string()))?;
    let kept: Vec<_> = candidates
        .into_iter()
        .filter(|t| tacgen_core::pose::pose_from_transform(&reference.pose, t, sym, w, h).is_ok())
        .take(want)
        .collect();
    if kept.len() < want {
        return Err(CliError::run(format!(
            "only {} of {want} transforms keep `{}` in frame",
            kept.len(),
            reference.id
        )));
    }
    Ok(kept)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

// ---------------------------------------------------------------------------
// table1: generation quality of the two-stage model against the joint and
// pipeline baselines on one shared cross-position benchmark.

fn table1(run: &RunDir, seed: u64, smoke: bool) -> Result<()> {
    let data = data_profile(seed, smoke);
    let codec_cfg = codec_profile(seed, smoke);
    let s1 = stage1_profile(seed, smoke);
    let s2 = stage2_profile(seed, smoke, Vec::new());
    let stack = build_stack(run, &data, &codec_cfg, &s1, Some(&s2))?;
    let cn = stack.control.as_ref().expect("stage 2 requested");

    let base = baseline_profile(seed, smoke);
    let hybrid_run = sub_run(run, "hybrid", "train-baseline hybrid", seed, &base)?;
    let hybrid = baseline_stage(
        &stack.manifest,
        &stack.codec,
        BaselineKind::Hybrid,
        None,
        &base,
        &hybrid_run,
    )?;
    let separate_run = sub_run(run, "separate", "train-baseline separate", seed, &base)?;
    let separate = baseline_stage(
        &stack.manifest,
        &stack.codec,
        BaselineKind::Separate,
        Some(&stack.stage1),
        &base,
        &separate_run,
    )?;

    let (cases_n, steps) = if smoke { (4, 4) } else { (60, 50) };
    let cases = position_cases(&stack.manifest, Split::Test, cases_n, seed)?;
    let models = [
        ModelUnderTest::TwoStage { base: &stack.stage1, cn },
        ModelUnderTest::Hybrid { weights: &hybrid },
        ModelUnderTest::Separate { stage1: &stack.stage1, position: &separate },
    ];
    let entries =
        run_benchmark(&stack.manifest, &cases, &models, &stack.codec, steps, 0.0, seed)?;
    let panels = run.subdir("panels")?;
    let report = eval_generation(&entries, "test", Some(panels.as_path()))?;
    std::fs::write(run.file("table1.csv"), report.to_csv_string())
        .map_err(|e| CliError::run(format!("table1.csv: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fig4: force-estimation MAE across a (real x generated) data grid, where
// the generated pool varies force at fixed positions.

fn fig4(run: &RunDir, seed: u64, smoke: bool) -> Result<()> {
    let data = data_profile(seed, smoke);
    let codec_cfg = codec_profile(seed, smoke);
    let s1 = stage1_profile(seed, smoke);
    let stack = build_stack(run, &data, &codec_cfg, &s1, None)?;

    let (n_refs, per_ref) = if smoke { (2, 4) } else { (100, 32) };
    let (real_grid, gen_grid, seeds): (Vec<usize>, Vec<usize>, u64) = if smoke {
        (vec![6], vec![0, 8], 1)
    } else {
        (vec![100, 400, 1600], vec![0, 800, 3200], 3)
    };

    // One reference per contact position, spread by a seeded shuffle.
    let mut by_position: BTreeMap<&str, &SampleRecord> = BTreeMap::new();
    for s in stack.manifest.split_samples(Split::Train).filter(|s| s.force.fz > 0.0) {
        by_position.entry(s.mask.as_str()).or_insert(s);
    }
    let mut refs: Vec<&SampleRecord> = by_position.into_values().collect();
    let mut rng = tagged_rng(seed, "fig4.refs", 0);
    refs.shuffle(&mut rng);
    refs.truncate(n_refs);
    if refs.len() < n_refs {
        return Err(CliError::run(format!("need {n_refs} reference positions, found {}", refs.len())));
    }

    let aug = AugmentCliConfig { seed, ..AugmentCliConfig::default() };
    let aug_dir = run.subdir("aug")?;
    let mut gen_items: Vec<TaskItem> = Vec::new();
    for (i, r) in refs.iter().enumerate() {
        let forces =
            draw_forces(per_ref, (aug.fz_min, aug.fz_max), data.shear_max, seed, &format!("fig4.f.{i}"));
        let report = tacgen_tasks::force_augment(
            &stack.manifest,
            &r.id,
            &forces,
            &stack.stage1,
            &stack.codec,
            &aug.to_task(),
            &aug_dir.join(format!("ref{i:03}")),
            seed,
        )?;
        gen_items.extend(load_task_items(&report.manifest, Split::Train, false)?);
    }

    let real_all = shuffled_items(
        &load_task_items(&stack.manifest, Split::Train, true)?,
        seed,
        "fig4.real",
    );
    let test_items = load_task_items(&stack.manifest, Split::Test, false)?;
    let gen_all = shuffled_items(&gen_items, seed, "fig4.gen");

    let est = estimator_profile(seed, smoke, data.h);
    let mut rows = Vec::new();
    for &n_real in &real_grid {
        for &n_gen in &gen_grid {
            if n_real > real_all.len() || n_gen > gen_all.len() {
                return Err(CliError::run(format!(
                    "grid cell ({n_real}, {n_gen}) exceeds pools ({}, {})",
                    real_all.len(),
                    gen_all.len()
                )));
            }
            for s in 0..seeds {
                let mut items = real_all[..n_real].to_vec();
                items.extend_from_slice(&gen_all[..n_gen]);
                let weights = train_force_estimator(&items, &est.to_estimator(), seed + s)?;
                let mae = force_mae(&weights, &test_items)?;
                rows.push(vec![
                    n_real.to_string(),
                    n_gen.to_string(),
                    (seed + s).to_string(),
                    fmt(mae),
                ]);
            }
        }
    }
    run.write_csv("fig4.csv", &["real", "generated", "seed", "mae_n"], &rows)
}

// ---------------------------------------------------------------------------
// fig5: force-estimation MAE when the real data covers only a fraction of
// the contact angles, with and without position-controlled generation.

fn fig5(run: &RunDir, seed: u64, smoke: bool) -> Result<()> {
    let all_angles: Vec<i32> =
        if smoke { vec![0, 90, 180, 270] } else { vec![0, 45, 90, 135, 180, 225, 270, 315] };
    let mut data = data_profile(seed, smoke);
    data.objects = vec!["tee".into()];
    data.angles = all_angles.clone();
    data.train_positions = if smoke { 8 } else { 160 };
    let codec_cfg = codec_profile(seed, smoke);
    let s1 = stage1_profile(seed, smoke);
    let s2 = stage2_profile(seed, smoke, Vec::new());
    let stack = build_stack(run, &data, &codec_cfg, &s1, Some(&s2))?;
    let cn = stack.control.as_ref().expect("stage 2 requested");

    // Position-controlled pool grown from a single reference at angle 0.
    let aug = AugmentCliConfig {
        seed,
        fz_min: 4.0,
        fz_max: 10.0,
        ..AugmentCliConfig::default()
    };
    let reference = stack
        .manifest
        .split_samples(Split::Train)
        .find(|s| s.force.fz >= 4.5 && s.pose.theta_deg.rem_euclid(360.0).round() as i32 % 360 == 0)
        .ok_or_else(|| CliError::run("no angle-0 reference with fz >= 4.5"))?
        .clone();
    let (n_pos, n_forces) = if smoke { (4, 2) } else { (150, 8) };
    let transforms = valid_transforms(&stack.manifest, &reference, n_pos, data.max_translation as usize, data.max_translation as usize, seed)?;
    let forces = draw_forces(n_forces, (aug.fz_min, aug.fz_max), data.shear_max, seed, "fig5.f");
    let report = full_augment(
        &stack.manifest,
        &reference.id,
        &forces,
        &transforms,
        &stack.stage1,
        cn,
        &stack.codec,
        &aug.to_task(),
        &run.subdir("aug")?,
        seed,
    )?;
    let gen_items = load_task_items(&report.manifest, Split::Train, false)?;

    let real_all = load_task_items(&stack.manifest, Split::Train, true)?;
    let test_items = load_task_items(&stack.manifest, Split::Test, false)?;

    let fractions: Vec<(&str, usize)> = if smoke {
        vec![("1", 1), ("2/4", 2), ("4/4", 4)]
    } else {
        vec![("1", 1), ("1/4", 2), ("2/4", 4), ("3/4", 6), ("4/4", 8)]
    };
    let est = estimator_profile(seed, smoke, data.h);
    let seeds = if smoke { 1 } else { 3 };
    let mut rows = Vec::new();
    for (label, n_angles) in fractions {
        let allowed = &all_angles[..n_angles];
        let real: Vec<TaskItem> = real_all
            .iter()
            .filter(|it| {
                let a = it.pose.theta_deg.rem_euclid(360.0).round() as i32 % 360;
                allowed.contains(&a)
            })
            .cloned()
            .collect();
        if real.is_empty() {
            return Err(CliError::run(format!("angle subset {label} has no real items")));
        }
        for (setting, extra) in [("real_only", 0usize), ("real_plus_gen", gen_items.len())] {
            for s in 0..seeds {
                let mut items = real.clone();
                items.extend_from_slice(&gen_items[..extra]);
                let weights = train_force_estimator(&items, &est.to_estimator(), seed + s)?;
                let mae = force_mae(&weights, &test_items)?;
                rows.push(vec![
                    label.to_string(),
                    n_angles.to_string(),
                    setting.to_string(),
                    (seed + s).to_string(),
                    real.len().to_string(),
                    extra.to_string(),
                    fmt(mae),
                ]);
            }
        }
    }
    run.write_csv(
        "fig5.csv",
        &["fraction", "n_angles", "setting", "seed", "n_real", "n_generated", "mae_n"],
        &rows,
    )
}

// ---------------------------------------------------------------------------
// table2: pose estimation trained purely on positioned generations, per
// object, with the tee withheld from control-branch training and a
// fixed-force column against the varying-force one.

fn table2(run: &RunDir, seed: u64, smoke: bool) -> Result<()> {
    let mut data = data_profile(seed, smoke);
    if smoke {
        data.objects = vec!["cross".into(), "tee".into()];
    }
    let exclude = vec!["tee".to_string()];
    let codec_cfg = codec_profile(seed, smoke);
    let s1 = stage1_profile(seed, smoke);
    let s2 = stage2_profile(seed, smoke, exclude.clone());
    let stack = build_stack(run, &data, &codec_cfg, &s1, Some(&s2))?;
    let cn = stack.control.as_ref().expect("stage 2 requested");

    let objects: Vec<String> = if smoke {
        data.objects.clone()
    } else {
        tacgen_core::synth::MaskPrototype::ALL.iter().map(|p| p.id().to_string()).collect()
    };
    let (n_pos, n_forces) = if smoke { (3, 2) } else { (200, 20) };
    let aug = AugmentCliConfig { seed, fz_min: 4.0, fz_max: 10.0, ..AugmentCliConfig::default() };
    let est = estimator_profile(seed, smoke, data.h);
    let seeds = if smoke { 1 } else { 3 };
    let test_all = load_task_items(&stack.manifest, Split::Test, false)?;

    let mut rows = Vec::new();
    for object in &objects {
        let reference = reference_of(&stack.manifest, object, 4.5)?.clone();
        let transforms = valid_transforms(
            &stack.manifest,
            &reference,
            n_pos,
            data.max_translation as usize,
            data.max_translation as usize,
            seed,
        )?;
        let test_items: Vec<TaskItem> =
            test_all.iter().filter(|it| &it.object_id == object).cloned().collect();
        for mode in ["varying", "fixed"] {
            let forces = if mode == "varying" {
                draw_forces(n_forces, (aug.fz_min, aug.fz_max), data.shear_max, seed, &format!("table2.{object}"))
            } else {
                vec![reference.force; n_forces]
            };
            let pool_dir = run.subdir(&format!("aug/{object}/{mode}"))?;
            let report = full_augment(
                &stack.manifest,
                &reference.id,
                &forces,
                &transforms,
                &stack.stage1,
                cn,
                &stack.codec,
                &aug.to_task(),
                &pool_dir,
                seed,
            )?;
            let pool = load_task_items(&report.manifest, Split::Train, true)?;
            for s in 0..seeds {
                let weights = train_pose_estimator(&pool, &est.to_pose(), seed + s)?;
                let (centre_px, angle_deg) = pose_errors(&weights, &test_items)?;
                rows.push(vec![
                    object.clone(),
                    exclude.contains(object).to_string(),
                    mode.to_string(),
                    (seed + s).to_string(),
                    pool.len().to_string(),
                    fmt(centre_px),
                    fmt(angle_deg),
                ]);
            }
        }
    }
    run.write_csv(
        "table2.csv",
        &["object", "unseen", "force_mode", "seed", "n_train", "centre_px", "angle_deg"],
        &rows,
    )
}

// ---------------------------------------------------------------------------
// table3: classification accuracy when one reference per class is expanded
// by positioned generation versus traditional augmentation, at matched
// dataset sizes.

fn table3(run: &RunDir, seed: u64, smoke: bool) -> Result<()> {
    let mut data = data_profile(seed, smoke);
    if smoke {
        data.objects = vec!["cyl_mid".into(), "cross".into()];
    }
    let codec_cfg = codec_profile(seed, smoke);
    let s1 = stage1_profile(seed, smoke);
    let s2 = stage2_profile(seed, smoke, Vec::new());
    let stack = build_stack(run, &data, &codec_cfg, &s1, Some(&s2))?;
    let cn = stack.control.as_ref().expect("stage 2 requested");

    let classes: Vec<String> = if smoke {
        data.objects.clone()
    } else {
        tacgen_core::synth::MaskPrototype::ALL.iter().map(|p| p.id().to_string()).collect()
    };
    let sizes: Vec<usize> = if smoke { vec![4, 8] } else { vec![2400, 4800] };
    let (n_pos, n_forces) = if smoke { (4, 2) } else { (100, 8) };

    // Generated pool: one reference per class through the control branch.
    let aug = AugmentCliConfig { seed, fz_min: 4.0, fz_max: 10.0, ..AugmentCliConfig::default() };
    let mut gen_items: Vec<TaskItem> = Vec::new();
    let mut refs: Vec<String> = Vec::new();
    for class in &classes {
        let reference = reference_of(&stack.manifest, class, 4.5)?.clone();
        refs.push(reference.id.clone());
        let transforms = valid_transforms(
            &stack.manifest,
            &reference,
            n_pos,
            data.max_translation as usize,
            data.max_translation as usize,
            seed,
        )?;
        let forces =
            draw_forces(n_forces, (aug.fz_min, aug.fz_max), data.shear_max, seed, &format!("table3.{class}"));
        let report = full_augment(
            &stack.manifest,
            &reference.id,
            &forces,
            &transforms,
            &stack.stage1,
            cn,
            &stack.codec,
            &aug.to_task(),
            &run.subdir(&format!("aug/gen/{class}"))?,
            seed,
        )?;
        gen_items.extend(load_task_items(&report.manifest, Split::Train, false)?);
    }

    // Traditional pools: the full enumerated grids from the same references.
    let ref_strs: Vec<&str> = refs.iter().map(String::as_str).collect();
    let geo = traditional_augment(
        &stack.manifest,
        &ref_strs,
        TraditionalMode::Geometric,
        &run.subdir("aug/geometric")?,
        seed,
    )?;
    let geo_items = load_task_items(&geo.manifest, Split::Train, false)?;
    let color = traditional_augment(
        &stack.manifest,
        &ref_strs,
        TraditionalMode::GeometricColor,
        &run.subdir("aug/geometric_color")?,
        seed,
    )?;
    let color_items = load_task_items(&color.manifest, Split::Train, false)?;
    run.write_csv(
        "counts.csv",
        &["regime", "per_class"],
        &[
            vec!["generated".into(), (gen_items.len() / classes.len()).to_string()],
            vec!["geometric".into(), traditional_count(TraditionalMode::Geometric).to_string()],
            vec![
                "geometric_color".into(),
                traditional_count(TraditionalMode::GeometricColor).to_string(),
            ],
        ],
    )?;

    let test_items = load_task_items(&stack.manifest, Split::Test, false)?;
    let mut est = estimator_profile(seed, smoke, data.h);
    if !smoke {
        est.steps = 400;
    }
    let regimes: [(&str, &Vec<TaskItem>); 3] =
        [("generated", &gen_items), ("geometric", &geo_items), ("geometric_color", &color_items)];
    let mut rows = Vec::new();
    for (arch, kind) in [("cnn", ClassifierKind::Cnn), ("vit", ClassifierKind::Vit)] {
        for (regime, pool) in &regimes {
            for &size in &sizes {
                let per_class = size / classes.len();
                let items =
                    per_class_subset(pool, per_class, seed, &format!("table3.{arch}.{regime}.{size}"))?;
                let weights = train_classifier(kind, &items, &est.to_classifier(), seed)?;
                let acc = tacgen_tasks::classification_accuracy(&weights, &test_items)?;
                rows.push(vec![
                    arch.to_string(),
                    regime.to_string(),
                    size.to_string(),
                    seed.to_string(),
                    items.len().to_string(),
                    fmt(acc),
                ]);
            }
        }
    }
    run.write_csv(
        "table3.csv",
        &["arch", "regime", "size", "seed", "n_train", "accuracy"],
        &rows,
    )
}
