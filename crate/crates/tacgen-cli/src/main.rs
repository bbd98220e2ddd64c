//! `tacgen`: synthetic tactile data, two-stage generator training, force and
//! position controlled augmentation, downstream estimators, and scripted
//! experiment reproduction.
//!
//! Every subcommand reads one JSON config (all fields defaulted; `--set
//! key.path=value` overrides individual fields) and writes into a run
//! directory that snapshots the resolved config. Exit codes: 0 success, 1
//! runtime failure, 2 argument parse error, 3 invalid config.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tacgen_core::mask::transform_mask;
use tacgen_core::rng::tagged_rng;
use tacgen_core::{ForceVector, Manifest, MaskTransform, SampleRecord};
use tacgen_diffusion::{generate, generate_positioned};
use tacgen_tasks::{eval_generation, sample_transform_grid};

use tacgen_cli::bench::{force_cases, position_cases, run_benchmark, ModelUnderTest};
use tacgen_cli::config::{
    self, AugmentCliConfig, BaselineConfig, BaselineKind, CodecCliConfig, EstimatorCliConfig,
    EvalEstimatorConfig, EvalGenConfig, ExperimentConfig, GenerateConfig, Stage1Config,
    Stage2Config, SynthConfig,
};
use tacgen_cli::error::{CliError, Result};
use tacgen_cli::experiments::{run_experiment, ExperimentName, EXPERIMENT_NAMES};
use tacgen_cli::pipeline::{
    baseline_stage, check_codec_gate, codec_stage, estimator_stage, gather_items, load_codec,
    load_control, load_estimator, load_manifest, load_model, locate, stage1_stage, stage2_stage,
    synth_stage, EstimatorTask,
};
use tacgen_cli::rundir::{resolve_out, RunDir};

#[derive(Parser)]
#[command(
    name = "tacgen",
    version,
    about = "Controllable tactile image generation and downstream evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; every field has a default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set optim.steps=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory; relative paths land under $TACGEN_RUN_ROOT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic tactile dataset with force and pose labels.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the latent codec and write its reconstruction gate report.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (or manifest.json).
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the force-conditioned denoiser on same-position frame pairs.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Codec run directory (or codec.json); its gate must have passed.
        #[arg(long)]
        codec: PathBuf,
    },
    /// Train the mask-conditioned control branch over a frozen stage-1 model.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Stage-1 run directory (or model.json).
        #[arg(long)]
        base: PathBuf,
    },
    /// Train a baseline generator: `hybrid` (joint force+mask conditioning)
    /// or `separate` (position-only model fed by stage-1 outputs).
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Baseline kind: hybrid | separate.
        #[arg(long)]
        kind: String,
        /// Stage-1 model, required for `separate`.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Generate one frame from a reference at a target force, optionally
    /// shifting the contact through the control branch.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Force-stage model directory (or model.json).
        #[arg(long)]
        base: PathBuf,
        /// Control branch directory (or control.json); required for any
        /// nonzero mask transform.
        #[arg(long)]
        control: Option<PathBuf>,
        /// Reference sample id from the dataset manifest.
        #[arg(long)]
        ref_id: String,
        /// Target normal force in newtons.
        #[arg(long, allow_negative_numbers = true)]
        fz: f64,
        /// Target shear components in newtons.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        fx: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        fy: f64,
        /// Contact translation in pixels and extra rotation in degrees.
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        dx: i32,
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        dy: i32,
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        dtheta: i32,
    },
    /// Expand one reference frame into a labeled augmentation dataset.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Control branch; required for mode `full`.
        #[arg(long)]
        control: Option<PathBuf>,
        /// `force` varies force at the reference position; `full` also moves
        /// the contact through the control branch.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        ref_id: String,
    },
    /// Train a downstream estimator: force | pose | classifier-cnn | classifier-vit.
    TrainEstimator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        /// Dataset directories; items are concatenated (repeatable).
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Evaluate a trained estimator on a dataset split.
    EvalEstimator {
        #[command(flatten)]
        common: Common,
        /// Estimator run directory (or estimator.json).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Benchmark generator variants against held-out frames.
    EvalGeneration {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Force-stage model; benchmarked on same-position force queries.
        #[arg(long)]
        base: PathBuf,
        /// Adding the control branch benchmarks the two-stage model on
        /// cross-position queries.
        #[arg(long)]
        control: Option<PathBuf>,
        /// Joint-conditioning baseline to benchmark alongside.
        #[arg(long)]
        hybrid: Option<PathBuf>,
        /// Position-only baseline (pipelined after `--base`).
        #[arg(long)]
        separate: Option<PathBuf>,
    },
    /// Run a scripted experiment end to end.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// One of: table1-desk, fig4-desk, fig5-desk, table2-desk, table3-desk.
        #[arg(value_parser = EXPERIMENT_NAMES)]
        name: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("{}", e.render());
        std::process::exit(i32::from(e.exit_code()));
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { common } => synth_data(&common),
        Command::TrainCodec { common, data } => train_codec_cmd(&common, &data),
        Command::TrainStage1 { common, data, codec } => train_stage1_cmd(&common, &data, &codec),
        Command::TrainStage2 { common, data, codec, base } => {
            train_stage2_cmd(&common, &data, &codec, &base)
        }
        Command::TrainBaseline { common, data, codec, kind, base } => {
            train_baseline_cmd(&common, &data, &codec, &kind, base.as_deref())
        }
        Command::Generate {
            common,
            data,
            codec,
            base,
            control,
            ref_id,
            fz,
            fx,
            fy,
            dx,
            dy,
            dtheta,
        } => {
            let force = ForceVector::new(fx, fy, fz);
            let shift = MaskTransform::new(dx, dy, dtheta);
            generate_cmd(&common, &data, &codec, &base, control.as_deref(), &ref_id, force, shift)
        }
        Command::Augment { common, data, codec, base, control, mode, ref_id } => {
            augment_cmd(&common, &data, &codec, &base, control.as_deref(), &mode, &ref_id)
        }
        Command::TrainEstimator { common, task, data } => {
            train_estimator_cmd(&common, &task, &data)
        }
        Command::EvalEstimator { common, model, data } => {
            eval_estimator_cmd(&common, &model, &data)
        }
        Command::EvalGeneration { common, data, codec, base, control, hybrid, separate } => {
            eval_generation_cmd(
                &common,
                &data,
                &codec,
                &base,
                control.as_deref(),
                hybrid.as_deref(),
                separate.as_deref(),
            )
        }
        Command::Experiment { common, name } => experiment_cmd(&common, &name),
    }
}

fn start<T>(common: &Common, command: &str) -> Result<(T, RunDir)>
where
    T: serde::Serialize + serde::de::DeserializeOwned + Default + config::Validate + HasSeed,
{
    let (cfg, tree) = config::load::<T>(common.config.as_deref(), &common.set)?;
    let out = resolve_out(common.out.as_deref(), command);
    let run = RunDir::create(&out, command, cfg.seed(), &tree)?;
    Ok((cfg, run))
}

/// Seed surfaced into run.json for every command.
trait HasSeed {
    fn seed(&self) -> u64;
}

macro_rules! has_seed {
    ($($t:ty),*) => {$(
        impl HasSeed for $t {
            fn seed(&self) -> u64 {
                self.seed
            }
        }
    )*};
}

has_seed!(
    SynthConfig,
    CodecCliConfig,
    Stage1Config,
    Stage2Config,
    BaselineConfig,
    GenerateConfig,
    AugmentCliConfig,
    EstimatorCliConfig,
    EvalGenConfig,
    ExperimentConfig
);

impl HasSeed for EvalEstimatorConfig {
    fn seed(&self) -> u64 {
        0
    }
}

fn synth_data(common: &Common) -> Result<()> {
    let (cfg, run) = start::<SynthConfig>(common, "synth-data")?;
    let manifest = synth_stage(&cfg, run.path())?;
    println!("wrote {} samples to {}", manifest.samples.len(), run.path().display());
    Ok(())
}

fn train_codec_cmd(common: &Common, data: &Path) -> Result<()> {
    let (cfg, run) = start::<CodecCliConfig>(common, "train-codec")?;
    let manifest = load_manifest(data)?;
    codec_stage(&manifest, &cfg, &run)?;
    println!("codec passed its gate; artifacts in {}", run.path().display());
    Ok(())
}

fn train_stage1_cmd(common: &Common, data: &Path, codec_dir: &Path) -> Result<()> {
    let (cfg, run) = start::<Stage1Config>(common, "train-stage1")?;
    let codec_file = locate(codec_dir, "codec.json")?;
    check_codec_gate(codec_file.parent().unwrap_or(codec_dir))?;
    let manifest = load_manifest(data)?;
    let codec = load_codec(codec_dir)?;
    stage1_stage(&manifest, &codec, &cfg, &run)?;
    println!("force-stage model in {}", run.path().display());
    Ok(())
}

fn train_stage2_cmd(common: &Common, data: &Path, codec_dir: &Path, base: &Path) -> Result<()> {
    let (cfg, run) = start::<Stage2Config>(common, "train-stage2")?;
    let manifest = load_manifest(data)?;
    let codec = load_codec(codec_dir)?;
    let stage1 = load_model(base)?;
    stage2_stage(&manifest, &codec, &stage1, &cfg, &run)?;
    println!("control branch in {}", run.path().display());
    Ok(())
}

fn train_baseline_cmd(
    common: &Common,
    data: &Path,
    codec_dir: &Path,
    kind: &str,
    base: Option<&Path>,
) -> Result<()> {
    let kind = match kind {
        "hybrid" => BaselineKind::Hybrid,
        "separate" => BaselineKind::Separate,
        other => return Err(CliError::run(format!("unknown baseline kind `{other}`"))),
    };
    let (cfg, run) = start::<BaselineConfig>(common, "train-baseline")?;
    let manifest = load_manifest(data)?;
    let codec = load_codec(codec_dir)?;
    let stage1 = base.map(load_model).transpose()?;
    baseline_stage(&manifest, &codec, kind, stage1.as_ref(), &cfg, &run)?;
    println!("baseline model in {}", run.path().display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate_cmd(
    common: &Common,
    data: &Path,
    codec_dir: &Path,
    base: &Path,
    control: Option<&Path>,
    ref_id: &str,
    force: ForceVector,
    shift: MaskTransform,
) -> Result<()> {
    let (cfg, run) = start::<GenerateConfig>(common, "generate")?;
    let manifest = load_manifest(data)?;
    let codec = load_codec(codec_dir)?;
    let stage1 = load_model(base)?;
    let record = find_record(&manifest, ref_id)?;
    let reference = manifest.load_image(record)?;
    let background = manifest.load_background(record)?;

    let sample_id = format!("cli.{ref_id}");
    let image = match control {
        None => {
            if !shift.is_identity() {
                return Err(CliError::run(
                    "mask transforms need the control branch; pass --control",
                ));
            }
            generate(
                &stage1,
                &codec,
                &reference,
                &background,
                record.force,
                force,
                cfg.steps,
                cfg.eta,
                cfg.seed,
                &sample_id,
            )?
        }
        Some(cn_dir) => {
            let cn = load_control(cn_dir)?;
            let mask = manifest.load_mask(record)?;
            let moved = transform_mask(&mask, &shift)?;
            generate_positioned(
                &stage1,
                &cn,
                &codec,
                &reference,
                &background,
                record.force,
                force,
                &moved,
                cfg.steps,
                cfg.eta,
                cfg.seed,
                &sample_id,
            )?
        }
    };
    image.save_png(&run.file("generated.png"))?;
    run.write_json(
        "generation.json",
        &json!({
            "ref_id": ref_id,
            "initial_force": record.force,
            "target_force": force,
            "transform": shift,
            "steps": cfg.steps,
            "eta": cfg.eta,
        }),
    )?;
    println!("wrote {}", run.file("generated.png").display());
    Ok(())
}

fn augment_cmd(
    common: &Common,
    data: &Path,
    codec_dir: &Path,
    base: &Path,
    control: Option<&Path>,
    mode: &str,
    ref_id: &str,
) -> Result<()> {
    let (cfg, run) = start::<AugmentCliConfig>(common, "augment")?;
    let manifest = load_manifest(data)?;
    let codec = load_codec(codec_dir)?;
    let stage1 = load_model(base)?;
    let record = find_record(&manifest, ref_id)?;

    let forces: Vec<ForceVector> = if cfg.fixed_force {
        vec![record.force; cfg.n_forces]
    } else {
        let mut rng = tagged_rng(cfg.seed, "augment.forces", 0);
        use rand::Rng;
        (0..cfg.n_forces)
            .map(|_| {
                ForceVector::new(
                    rng.random_range(-cfg.shear_max..=cfg.shear_max),
                    rng.random_range(-cfg.shear_max..=cfg.shear_max),
                    rng.random_range(cfg.fz_min..cfg.fz_max),
                )
            })
            .collect()
    };

    let report = match mode {
        "force" => tacgen_tasks::force_augment(
            &manifest,
            ref_id,
            &forces,
            &stage1,
            &codec,
            &cfg.to_task(),
            run.path(),
            cfg.seed,
        )?,
        "full" => {
            let cn_dir = control.ok_or_else(|| {
                CliError::run("mode `full` moves the contact; pass --control")
            })?;
            let cn = load_control(cn_dir)?;
            let transforms = sample_transform_grid(
                cfg.n_positions,
                cfg.max_dx,
                cfg.max_dy,
                &cfg.angle_set(),
                cfg.seed,
            )?;
            tacgen_tasks::full_augment(
                &manifest,
                ref_id,
                &forces,
                &transforms,
                &stage1,
                &cn,
                &codec,
                &cfg.to_task(),
                run.path(),
                cfg.seed,
            )?
        }
        other => return Err(CliError::run(format!("unknown augment mode `{other}`"))),
    };
    run.write_json(
        "augment_report.json",
        &json!({
            "samples": report.manifest.samples.len(),
            "rejected_forces": report.rejected_forces,
            "skipped_transforms": report.skipped_transforms,
        }),
    )?;
    println!(
        "{} generated samples in {} ({} forces rejected, {} transforms skipped)",
        report.manifest.samples.len(),
        run.path().display(),
        report.rejected_forces,
        report.skipped_transforms
    );
    Ok(())
}

fn train_estimator_cmd(common: &Common, task: &str, data: &[PathBuf]) -> Result<()> {
    let task = EstimatorTask::parse(task)?;
    let (cfg, run) = start::<EstimatorCliConfig>(common, "train-estimator")?;
    estimator_stage(task, data, &cfg, &run)?;
    println!("estimator in {}", run.path().display());
    Ok(())
}

fn eval_estimator_cmd(common: &Common, model: &Path, data: &[PathBuf]) -> Result<()> {
    let (cfg, run) = start::<EvalEstimatorConfig>(common, "eval-estimator")?;
    let split = config::split_from_str(&cfg.split)?;
    let weights = load_estimator(model)?;
    let items = gather_items(data, split, false)?;
    let metrics = tacgen_cli::pipeline::estimator_metrics(&weights, &items)?;
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|(k, v)| vec![k.to_string(), format!("{v:.6}")])
        .collect();
    run.write_csv("metrics.csv", &["metric", "value"], &rows)?;
    for (k, v) in &metrics {
        println!("{k}={v:.6}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_generation_cmd(
    common: &Common,
    data: &Path,
    codec_dir: &Path,
    base: &Path,
    control: Option<&Path>,
    hybrid: Option<&Path>,
    separate: Option<&Path>,
) -> Result<()> {
    let (cfg, run) = start::<EvalGenConfig>(common, "eval-generation")?;
    let split = config::split_from_str(&cfg.split)?;
    let manifest = load_manifest(data)?;
    let codec = load_codec(codec_dir)?;
    let stage1 = load_model(base)?;
    let cn = control.map(load_control).transpose()?;
    let hybrid_w = hybrid.map(load_model).transpose()?;
    let separate_w = separate.map(load_model).transpose()?;

    let mut entries = Vec::new();
    let force_bench = force_cases(&manifest, split, cfg.cases, cfg.seed)?;
    entries.extend(run_benchmark(
        &manifest,
        &force_bench,
        &[ModelUnderTest::ForceStage { stage1: &stage1 }],
        &codec,
        cfg.sample_steps,
        cfg.eta,
        cfg.seed,
    )?);

    let mut positioned: Vec<ModelUnderTest> = Vec::new();
    if let Some(cn) = cn.as_ref() {
        positioned.push(ModelUnderTest::TwoStage { base: &stage1, cn });
    }
    if let Some(h) = hybrid_w.as_ref() {
        positioned.push(ModelUnderTest::Hybrid { weights: h });
    }
    if let Some(s) = separate_w.as_ref() {
        positioned.push(ModelUnderTest::Separate { stage1: &stage1, position: s });
    }
    if !positioned.is_empty() {
        let cases = position_cases(&manifest, split, cfg.cases, cfg.seed)?;
        entries.extend(run_benchmark(
            &manifest,
            &cases,
            &positioned,
            &codec,
            cfg.sample_steps,
            cfg.eta,
            cfg.seed,
        )?);
    }

    let panels = if cfg.panels { Some(run.subdir("panels")?) } else { None };
    let report = eval_generation(&entries, &cfg.split, panels.as_deref())?;
    std::fs::write(run.file("report.csv"), report.to_csv_string())
        .map_err(|e| CliError::run(format!("report.csv: {e}")))?;
    for row in &report.rows {
        println!(
            "{} n={} mse={:.6} ssim={:.4}",
            row.model, row.n, row.mse_mean, row.ssim_mean
        );
    }
    Ok(())
}

fn experiment_cmd(common: &Common, name: &str) -> Result<()> {
    let exp = ExperimentName::parse(name)?;
    let (cfg, tree) = config::load::<ExperimentConfig>(common.config.as_deref(), &common.set)?;
    let out = resolve_out(common.out.as_deref(), &format!("experiment-{}", exp.label()));
    run_experiment(exp, &cfg, &tree, &out)?;
    println!("experiment artifacts in {}", out.display());
    Ok(())
}

fn find_record<'a>(manifest: &'a Manifest, ref_id: &str) -> Result<&'a SampleRecord> {
    manifest
        .sample_by_id(ref_id)
        .ok_or_else(|| CliError::run(format!("sample `{ref_id}` is not in the manifest")))
}
