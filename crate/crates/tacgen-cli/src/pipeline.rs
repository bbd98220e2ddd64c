//! Stage implementations shared by the subcommands and the scripted
//! experiments. Each stage trains (or builds) one artifact, writes it into a
//! run directory under a fixed file name, and returns it in memory. File
//! names double as the hand-off contract between stages:
//!
//! * `manifest.json` + images: a dataset directory
//! * `codec.json` + `report.json`: a trained codec and its gate outcome
//! * `model.json`: a denoiser (force stage, hybrid or position-only)
//! * `control.json`: a control branch over a frozen force-stage model
//! * `estimator.json`: a downstream estimator

use std::path::{Path, PathBuf};

use serde_json::json;
use tacgen_core::{Manifest, Split};
use tacgen_diffusion::{
    build_masked_tuples, build_separate_tuples, build_stage1_pairs, encode_split, init_controlnet,
    train_codec, train_denoiser, train_stage2, Codec, CondMode, ControlNetWeights,
    GeneratorWeights, TrainItem,
};
use tacgen_tasks::{EstimatorWeights, TaskItem};

use crate::config::{
    split_from_str, BaselineConfig, BaselineKind, CodecCliConfig, EstimatorCliConfig,
    Stage1Config, Stage2Config, SynthConfig,
};
use crate::error::{CliError, Result};
use crate::rundir::RunDir;

/// Resolves a `--foo <path>` argument that may name either the artifact file
/// itself or the run directory containing it.
pub fn locate(path: &Path, file: &str) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let inner = path.join(file);
    if inner.is_file() {
        return Ok(inner);
    }
    Err(CliError::run(format!("{}: found neither the file nor {file} inside it", path.display())))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(Manifest::load(&locate(dir, "manifest.json")?)?)
}

pub fn load_codec(dir: &Path) -> Result<Codec> {
    Ok(Codec::load(&locate(dir, "codec.json")?)?)
}

pub fn load_model(dir: &Path) -> Result<GeneratorWeights> {
    Ok(GeneratorWeights::load(&locate(dir, "model.json")?)?)
}

pub fn load_control(dir: &Path) -> Result<ControlNetWeights> {
    Ok(ControlNetWeights::load(&locate(dir, "control.json")?)?)
}

pub fn load_estimator(dir: &Path) -> Result<EstimatorWeights> {
    Ok(EstimatorWeights::load(&locate(dir, "estimator.json")?)?)
}

/// The codec gate precedes any generator training: a codec directory must
/// carry a report that says the reconstruction bar was met.
pub fn check_codec_gate(dir: &Path) -> Result<()> {
    let report = locate(dir, "report.json")
        .map_err(|_| CliError::run(format!("{}: no codec gate report; train the codec first", dir.display())))?;
    let text = std::fs::read_to_string(&report)
        .map_err(|e| CliError::run(format!("{}: {e}", report.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::run(format!("{}: {e}", report.display())))?;
    if v["passed"].as_bool() != Some(true) {
        return Err(CliError::run(format!(
            "{}: codec did not pass its reconstruction gate",
            dir.display()
        )));
    }
    Ok(())
}

pub fn synth_stage(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    Ok(tacgen_core::synth::build_synthetic_dataset(&cfg.to_spec()?, dir)?)
}

pub fn codec_stage(manifest: &Manifest, cfg: &CodecCliConfig, run: &RunDir) -> Result<Codec> {
    let (codec, report) = train_codec(manifest, &cfg.codec, cfg.seed)?;
    codec.save(&run.file("codec.json"))?;
    run.write_losses("loss.csv", &report.losses)?;
    run.write_json(
        "report.json",
        &json!({
            "final_ssim": report.final_metric,
            "gate_ssim": cfg.codec.gate_ssim,
            "passed": true,
        }),
    )?;
    Ok(codec)
}

pub fn stage1_stage(
    manifest: &Manifest,
    codec: &Codec,
    cfg: &Stage1Config,
    run: &RunDir,
) -> Result<GeneratorWeights> {
    let bank = encode_split(manifest, codec, Split::Train)?;
    let items =
        build_stage1_pairs(manifest, &bank, Split::Train, cfg.pairs, cfg.identity_rate, cfg.seed)?;
    let (weights, report) = train_denoiser(
        &items,
        &cfg.dit.with_mode(CondMode::ForceOnly),
        cfg.schedule.clone(),
        &cfg.optim.to_train(),
        &codec.fingerprint(),
        cfg.seed,
    )?;
    weights.save(&run.file("model.json"))?;
    run.write_losses("loss.csv", &report.losses)?;
    Ok(weights)
}

/// Drops every sample of the excluded objects before tuple building, so the
/// control branch never sees their masks.
fn without_objects(manifest: &Manifest, exclude: &[String]) -> Manifest {
    if exclude.is_empty() {
        return manifest.clone();
    }
    let mut m = manifest.clone();
    m.samples.retain(|s| !exclude.contains(&s.object_id));
    m
}

pub fn stage2_stage(
    manifest: &Manifest,
    codec: &Codec,
    base: &GeneratorWeights,
    cfg: &Stage2Config,
    run: &RunDir,
) -> Result<ControlNetWeights> {
    let visible = without_objects(manifest, &cfg.exclude_objects);
    let bank = encode_split(&visible, codec, Split::Train)?;
    let items = build_masked_tuples(
        &visible,
        &bank,
        Split::Train,
        cfg.tuples,
        cfg.same_position_rate,
        cfg.seed,
    )?;
    let cn = init_controlnet(base)?;
    let (cn, report) = train_stage2(&items, base, cn, &cfg.optim.to_train(), cfg.seed)?;
    cn.save(&run.file("control.json"))?;
    run.write_losses("loss.csv", &report.losses)?;
    Ok(cn)
}

pub fn baseline_stage(
    manifest: &Manifest,
    codec: &Codec,
    kind: BaselineKind,
    stage1: Option<&GeneratorWeights>,
    cfg: &BaselineConfig,
    run: &RunDir,
) -> Result<GeneratorWeights> {
    let bank = encode_split(manifest, codec, Split::Train)?;
    let tuples = build_masked_tuples(
        manifest,
        &bank,
        Split::Train,
        cfg.tuples,
        cfg.same_position_rate,
        cfg.seed,
    )?;
    let (items, mode): (Vec<TrainItem>, CondMode) = match kind {
        BaselineKind::Hybrid => (tuples, CondMode::Hybrid),
        BaselineKind::Separate => {
            let base = stage1.ok_or_else(|| {
                CliError::run("the separate baseline needs a trained force-stage model (--base)")
            })?;
            (
                build_separate_tuples(&tuples, base, cfg.sample_steps, cfg.seed)?,
                CondMode::PositionOnly,
            )
        }
    };
    let (weights, report) = train_denoiser(
        &items,
        &cfg.dit.with_mode(mode),
        cfg.schedule.clone(),
        &cfg.optim.to_train(),
        &codec.fingerprint(),
        cfg.seed,
    )?;
    weights.save(&run.file("model.json"))?;
    run.write_losses("loss.csv", &report.losses)?;
    Ok(weights)
}

/// Estimator task selector shared by `train-estimator` and the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorTask {
    Force,
    Pose,
    ClassifierCnn,
    ClassifierVit,
}

impl EstimatorTask {
    pub fn parse(s: &str) -> Result<EstimatorTask> {
        match s {
            "force" => Ok(EstimatorTask::Force),
            "pose" => Ok(EstimatorTask::Pose),
            "classifier-cnn" => Ok(EstimatorTask::ClassifierCnn),
            "classifier-vit" => Ok(EstimatorTask::ClassifierVit),
            other => Err(CliError::run(format!(
                "unknown task `{other}` (expected force, pose, classifier-cnn or classifier-vit)"
            ))),
        }
    }
}

/// Loads and concatenates the chosen split of several manifests; estimator
/// training does not care which corpus an item came from.
pub fn gather_items(dirs: &[PathBuf], split: Split, with_aux: bool) -> Result<Vec<TaskItem>> {
    let mut items = Vec::new();
    for dir in dirs {
        let manifest = load_manifest(dir)?;
        items.extend(tacgen_tasks::load_task_items(&manifest, split, with_aux)?);
    }
    Ok(items)
}

pub fn estimator_stage(
    task: EstimatorTask,
    data: &[PathBuf],
    cfg: &EstimatorCliConfig,
    run: &RunDir,
) -> Result<EstimatorWeights> {
    let split = split_from_str(&cfg.split)?;
    let with_aux = matches!(task, EstimatorTask::Force | EstimatorTask::Pose);
    let items = gather_items(data, split, with_aux)?;
    let weights = match task {
        EstimatorTask::Force => {
            tacgen_tasks::train_force_estimator(&items, &cfg.to_estimator(), cfg.seed)?
        }
        EstimatorTask::Pose => tacgen_tasks::train_pose_estimator(&items, &cfg.to_pose(), cfg.seed)?,
        EstimatorTask::ClassifierCnn => tacgen_tasks::train_classifier(
            tacgen_tasks::ClassifierKind::Cnn,
            &items,
            &cfg.to_classifier(),
            cfg.seed,
        )?,
        EstimatorTask::ClassifierVit => tacgen_tasks::train_classifier(
            tacgen_tasks::ClassifierKind::Vit,
            &items,
            &cfg.to_classifier(),
            cfg.seed,
        )?,
    };
    weights.save(&run.file("estimator.json"))?;
    Ok(weights)
}

/// Task-specific held-out metrics as (column, value) pairs, written by
/// `eval-estimator` and reused inside experiments.
pub fn estimator_metrics(
    weights: &EstimatorWeights,
    items: &[TaskItem],
) -> Result<Vec<(&'static str, f64)>> {
    use tacgen_tasks::TaskTag;
    Ok(match weights.meta.task {
        TaskTag::Force => vec![("mae_n", tacgen_tasks::force_mae(weights, items)?)],
        TaskTag::Pose => {
            let (centre_px, angle_deg) = tacgen_tasks::pose_errors(weights, items)?;
            vec![("centre_px", centre_px), ("angle_deg", angle_deg)]
        }
        TaskTag::CnnClassifier | TaskTag::VitClassifier => {
            vec![("accuracy", tacgen_tasks::classification_accuracy(weights, items)?)]
        }
    })
}
