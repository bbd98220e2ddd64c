//! One config story for every subcommand: a typed struct with full
//! defaults, optionally overlaid by a JSON file, then by `--set key.path=v`
//! flags. Merging happens on JSON trees so every failure can name the exact
//! dotted path that caused it.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Overlay `patch` onto `base` in place. Keys missing from `base` and kind
/// mismatches are rejected with the full dotted path.
fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<()> {
    let (Value::Object(bm), Value::Object(pm)) = (&mut *base, patch) else {
        if kind(base) != kind(patch) && !base.is_null() {
            return Err(CliError::config(
                at,
                format!("expected {}, got {}", kind(base), kind(patch)),
            ));
        }
        *base = patch.clone();
        return Ok(());
    };
    for (k, v) in pm {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match bm.get_mut(k) {
            None => return Err(CliError::config(path, "unknown key")),
            Some(slot) => merge(slot, v, &path)?,
        }
    }
    Ok(())
}

/// Apply one `key.path=raw` override. The raw text is coerced to the kind of
/// the value already present at that path.
fn apply_set(tree: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(spec, "override must look like key.path=value"))?;
    let mut node = &mut *tree;
    for seg in path.split('.') {
        node = match node {
            Value::Object(m) => m
                .get_mut(seg)
                .ok_or_else(|| CliError::config(path, format!("unknown key (at segment `{seg}`)")))?,
            other => {
                return Err(CliError::config(
                    path,
                    format!("segment `{seg}` indexes into a {}", kind(other)),
                ))
            }
        };
    }
    let parsed = match node {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| CliError::config(path, format!("expected bool, got `{raw}`")))?,
        Value::Number(_) => serde_json::from_str::<serde_json::Number>(raw)
            .map(Value::Number)
            .map_err(|_| CliError::config(path, format!("expected number, got `{raw}`")))?,
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => serde_json::from_str::<Value>(raw)
            .ok()
            .filter(Value::is_array)
            .ok_or_else(|| CliError::config(path, format!("expected JSON array, got `{raw}`")))?,
        other => {
            return Err(CliError::config(
                path,
                format!("cannot override a {} value", kind(other)),
            ))
        }
    };
    *node = parsed;
    Ok(())
}

pub trait Validate {
    /// Range and consistency checks; errors must name the key path.
    fn validate(&self) -> Result<()>;
}

fn bad(path: &str, msg: impl Into<String>) -> CliError {
    CliError::config(path, msg)
}

pub fn require(ok: bool, path: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(bad(path, msg))
    }
}

/// Defaults -> optional file -> --set overrides -> typed config. Returns the
/// resolved JSON tree alongside so the run directory can snapshot it.
pub fn load<T>(file: Option<&Path>, sets: &[String]) -> Result<(T, Value)>
where
    T: Serialize + DeserializeOwned + Default + Validate,
{
    let mut tree = serde_json::to_value(T::default())
        .map_err(|e| CliError::run(format!("default config does not serialize: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(path.display().to_string(), e.to_string()))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(path.display().to_string(), e.to_string()))?;
        merge(&mut tree, &patch, "")?;
    }
    for spec in sets {
        apply_set(&mut tree, spec)?;
    }
    let typed: T = serde_json::from_value(tree.clone())
        .map_err(|e| CliError::config("<config>", e.to_string()))?;
    typed.validate()?;
    Ok((typed, tree))
}

// ---------------------------------------------------------------------------
// Per-command configs. Every field has a default so each command runs with
// no config file at all.

/// Transformer size without the conditioning mode (the command decides that).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DitSize {
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

impl DitSize {
    pub fn with_mode(self, mode: tacgen_diffusion::CondMode) -> tacgen_diffusion::DiTConfig {
        tacgen_diffusion::DiTConfig {
            patch: self.patch,
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mode,
        }
    }

    fn validate(&self, at: &str) -> Result<()> {
        require(self.patch > 0, &format!("{at}.patch"), "must be positive")?;
        require(self.depth > 0, &format!("{at}.depth"), "must be positive")?;
        require(
            self.dim > 0 && self.dim % self.heads.max(1) == 0 && self.dim % 4 == 0,
            &format!("{at}.dim"),
            "must be positive, divisible by heads and by 4",
        )
    }
}

impl Default for DitSize {
    fn default() -> Self {
        Self { patch: 2, depth: 6, dim: 192, heads: 6 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
}

impl OptimSpec {
    pub fn to_train(self) -> tacgen_diffusion::TrainConfig {
        tacgen_diffusion::TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            weight_decay: self.weight_decay,
        }
    }

    fn validate(&self, at: &str) -> Result<()> {
        require(self.steps > 0, &format!("{at}.steps"), "must be positive")?;
        require(self.batch > 0, &format!("{at}.batch"), "must be positive")?;
        require(
            self.lr_start > 0.0 && self.lr_end > 0.0,
            &format!("{at}.lr_start"),
            "learning rates must be positive",
        )
    }
}

/// Synthetic-corpus generation (`synth-data`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub mm_per_px: f64,
    /// Prototype ids; empty means all six.
    pub objects: Vec<String>,
    pub train_positions: usize,
    pub val_positions: usize,
    pub test_positions: usize,
    pub frames_per_position: usize,
    pub fz_min: f64,
    pub fz_max: f64,
    pub shear_max: f64,
    pub max_translation: i32,
    /// Allowed contact angles in degrees; empty means any whole degree.
    pub angles: Vec<i32>,
    pub no_contact_frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            h: 64,
            w: 64,
            mm_per_px: 0.05,
            objects: Vec::new(),
            train_positions: 300,
            val_positions: 10,
            test_positions: 10,
            frames_per_position: 4,
            fz_min: 1.0,
            fz_max: 10.0,
            shear_max: 2.0,
            max_translation: 12,
            angles: Vec::new(),
            no_contact_frames: 0,
        }
    }
}

impl SynthConfig {
    pub fn to_spec(&self) -> Result<tacgen_core::synth::SynthDatasetSpec> {
        use tacgen_core::synth::{AngleSet, MaskPrototype, ObjectSpec, SynthDatasetSpec};
        let objects: Vec<ObjectSpec> = if self.objects.is_empty() {
            MaskPrototype::ALL.iter().map(|p| ObjectSpec::of(*p)).collect()
        } else {
            self.objects
                .iter()
                .map(|id| {
                    MaskPrototype::from_id(id)
                        .map(ObjectSpec::of)
                        .ok_or_else(|| bad("objects", format!("unknown prototype `{id}`")))
                })
                .collect::<Result<_>>()?
        };
        Ok(SynthDatasetSpec {
            sensor: tacgen_core::SensorConfig { h: self.h, w: self.w, mm_per_px: self.mm_per_px },
            params: tacgen_core::synth::SensorParams::default(),
            seed: self.seed,
            objects,
            train_positions: self.train_positions,
            val_positions: self.val_positions,
            test_positions: self.test_positions,
            frames_per_position: self.frames_per_position,
            fz_range: (self.fz_min, self.fz_max),
            shear_max: self.shear_max,
            max_translation: self.max_translation,
            angles: if self.angles.is_empty() {
                AngleSet::Uniform
            } else {
                AngleSet::Choices(self.angles.clone())
            },
            no_contact_frames: self.no_contact_frames,
        })
    }
}

impl Validate for SynthConfig {
    fn validate(&self) -> Result<()> {
        require(self.h >= 16 && self.w >= 16, "h", "images must be at least 16x16")?;
        require(self.mm_per_px > 0.0, "mm_per_px", "must be positive")?;
        require(self.train_positions > 0, "train_positions", "must be positive")?;
        require(self.frames_per_position > 0, "frames_per_position", "must be positive")?;
        require(
            self.fz_min > 0.0 && self.fz_max > self.fz_min,
            "fz_min",
            "need 0 < fz_min < fz_max",
        )?;
        self.to_spec().map(|_| ())
    }
}

/// Latent codec training (`train-codec`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecCliConfig {
    pub seed: u64,
    pub codec: tacgen_diffusion::CodecConfig,
}

impl Default for CodecCliConfig {
    fn default() -> Self {
        Self { seed: 17, codec: tacgen_diffusion::CodecConfig::default() }
    }
}

impl Validate for CodecCliConfig {
    fn validate(&self) -> Result<()> {
        let c = &self.codec;
        require(c.identity || c.factor > 1, "codec.factor", "trained codec needs factor > 1")?;
        require(
            (0.0..=1.0).contains(&c.gate_ssim),
            "codec.gate_ssim",
            "must lie in [0, 1]",
        )?;
        require(
            (0.0..=1.0).contains(&c.mask_mix),
            "codec.mask_mix",
            "must lie in [0, 1]",
        )?;
        require(c.identity || c.steps > 0, "codec.steps", "must be positive")
    }
}

/// Force-stage generator training (`train-stage1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub seed: u64,
    pub dit: DitSize,
    pub schedule: tacgen_diffusion::ScheduleConfig,
    /// Same-position force pairs drawn from the train split.
    pub pairs: usize,
    /// Fraction of pairs with a zero force delta.
    pub identity_rate: f64,
    pub optim: OptimSpec,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            seed: 17,
            dit: DitSize::default(),
            schedule: tacgen_diffusion::ScheduleConfig::default(),
            pairs: 2000,
            identity_rate: 0.1,
            optim: OptimSpec {
                steps: 3000,
                batch: 8,
                lr_start: 3e-4,
                lr_end: 3e-5,
                weight_decay: 1e-4,
            },
        }
    }
}

impl Validate for Stage1Config {
    fn validate(&self) -> Result<()> {
        self.dit.validate("dit")?;
        self.optim.validate("optim")?;
        require(self.pairs > 0, "pairs", "must be positive")?;
        require(
            (0.0..=1.0).contains(&self.identity_rate),
            "identity_rate",
            "must lie in [0, 1]",
        )?;
        require(self.schedule.steps > 1, "schedule.steps", "must exceed 1")
    }
}

/// Control-branch fine-tuning (`train-stage2`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    pub seed: u64,
    /// Cross-position (reference, target, mask) tuples from the train split.
    pub tuples: usize,
    /// Fraction of tuples where the target stays at the reference position.
    pub same_position_rate: f64,
    /// Objects whose samples are withheld from tuple building.
    pub exclude_objects: Vec<String>,
    pub optim: OptimSpec,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            seed: 17,
            tuples: 1500,
            same_position_rate: 0.15,
            exclude_objects: Vec::new(),
            optim: OptimSpec {
                steps: 2500,
                batch: 8,
                lr_start: 3e-4,
                lr_end: 3e-5,
                weight_decay: 1e-4,
            },
        }
    }
}

impl Validate for Stage2Config {
    fn validate(&self) -> Result<()> {
        self.optim.validate("optim")?;
        require(self.tuples > 0, "tuples", "must be positive")?;
        require(
            (0.0..=1.0).contains(&self.same_position_rate),
            "same_position_rate",
            "must lie in [0, 1]",
        )
    }
}

/// Which comparison model `train-baseline` builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// One trunk conditioned on force and mask jointly.
    Hybrid,
    /// Position-only model consuming force-stage generations.
    Separate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub seed: u64,
    pub dit: DitSize,
    pub schedule: tacgen_diffusion::ScheduleConfig,
    pub tuples: usize,
    pub same_position_rate: f64,
    /// Denoising steps used to produce the pipeline baseline's inputs.
    pub sample_steps: usize,
    pub optim: OptimSpec,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        Self {
            seed: 17,
            dit: s1.dit,
            schedule: s1.schedule,
            tuples: 1500,
            same_position_rate: 0.15,
            sample_steps: 25,
            optim: s1.optim,
        }
    }
}

impl Validate for BaselineConfig {
    fn validate(&self) -> Result<()> {
        self.dit.validate("dit")?;
        self.optim.validate("optim")?;
        require(self.tuples > 0, "tuples", "must be positive")?;
        require(self.sample_steps > 0, "sample_steps", "must be positive")?;
        require(
            (0.0..=1.0).contains(&self.same_position_rate),
            "same_position_rate",
            "must lie in [0, 1]",
        )
    }
}

/// Single-sample generation (`generate`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub steps: usize,
    pub eta: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { seed: 17, steps: 50, eta: 0.0 }
    }
}

impl Validate for GenerateConfig {
    fn validate(&self) -> Result<()> {
        require(self.steps > 0, "steps", "must be positive")?;
        require(self.eta >= 0.0, "eta", "must be >= 0")
    }
}

/// Dataset augmentation (`augment`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentCliConfig {
    pub seed: u64,
    pub sample_steps: usize,
    pub eta: f64,
    /// Acceptance band for target normal forces.
    pub fz_min: f64,
    pub fz_max: f64,
    /// Shear band for drawn target forces.
    pub shear_max: f64,
    /// Target forces drawn per reference (force and full modes).
    pub n_forces: usize,
    /// When set, every target keeps the reference force (position-only
    /// variety); used by the fixed-force comparisons.
    pub fixed_force: bool,
    /// Mask transforms drawn for full mode.
    pub n_positions: usize,
    pub max_dx: usize,
    pub max_dy: usize,
    /// Allowed extra rotations; empty means any whole degree.
    pub angles: Vec<i32>,
}

impl Default for AugmentCliConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            sample_steps: 50,
            eta: 0.0,
            fz_min: 1.0,
            fz_max: 10.0,
            shear_max: 2.0,
            n_forces: 20,
            fixed_force: false,
            n_positions: 150,
            max_dx: 12,
            max_dy: 12,
            angles: Vec::new(),
        }
    }
}

impl AugmentCliConfig {
    pub fn to_task(&self) -> tacgen_tasks::AugmentConfig {
        tacgen_tasks::AugmentConfig {
            sample_steps: self.sample_steps,
            eta: self.eta,
            fz_range: (self.fz_min, self.fz_max),
        }
    }

    pub fn angle_set(&self) -> tacgen_core::synth::AngleSet {
        if self.angles.is_empty() {
            tacgen_core::synth::AngleSet::Uniform
        } else {
            tacgen_core::synth::AngleSet::Choices(self.angles.clone())
        }
    }
}

impl Validate for AugmentCliConfig {
    fn validate(&self) -> Result<()> {
        require(self.sample_steps > 0, "sample_steps", "must be positive")?;
        require(self.eta >= 0.0, "eta", "must be >= 0")?;
        require(
            self.fz_min > 0.0 && self.fz_max > self.fz_min,
            "fz_min",
            "need 0 < fz_min < fz_max",
        )?;
        require(self.shear_max >= 0.0, "shear_max", "must be >= 0")?;
        require(self.n_forces > 0, "n_forces", "must be positive")?;
        require(self.n_positions > 0, "n_positions", "must be positive")
    }
}

/// Downstream estimator training (`train-estimator`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorCliConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Weight of the auxiliary decoding loss (force: depth, pose: mask).
    pub lambda_aux: f64,
    /// Circular angle head for pose; ignored elsewhere.
    pub circular: bool,
    /// Classifier dropout before the last layer.
    pub dropout: f64,
    pub vit: tacgen_tasks::VitConfig,
    /// Split of each input manifest used for training.
    pub split: String,
}

impl Default for EstimatorCliConfig {
    fn default() -> Self {
        let base = tacgen_tasks::EstimatorTrainConfig::default();
        Self {
            seed: 17,
            steps: base.steps,
            batch: base.batch,
            lr_start: base.lr_start,
            lr_end: base.lr_end,
            weight_decay: base.weight_decay,
            lambda_aux: base.lambda_aux,
            circular: true,
            dropout: 0.5,
            vit: base.vit,
            split: "train".into(),
        }
    }
}

impl EstimatorCliConfig {
    pub fn to_estimator(&self) -> tacgen_tasks::EstimatorTrainConfig {
        tacgen_tasks::EstimatorTrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            weight_decay: self.weight_decay,
            lambda_aux: self.lambda_aux,
            vit: self.vit,
        }
    }

    pub fn to_pose(&self) -> tacgen_tasks::PoseTrainConfig {
        tacgen_tasks::PoseTrainConfig { base: self.to_estimator(), circular: self.circular }
    }

    pub fn to_classifier(&self) -> tacgen_tasks::ClassifierTrainConfig {
        tacgen_tasks::ClassifierTrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            vit: self.vit,
        }
    }
}

impl Validate for EstimatorCliConfig {
    fn validate(&self) -> Result<()> {
        require(self.steps > 0, "steps", "must be positive")?;
        require(self.batch > 0, "batch", "must be positive")?;
        require(self.lambda_aux >= 0.0, "lambda_aux", "must be >= 0")?;
        require((0.0..1.0).contains(&self.dropout), "dropout", "must lie in [0, 1)")?;
        require(
            matches!(self.split.as_str(), "train" | "val" | "test"),
            "split",
            "must be train, val or test",
        )
    }
}

/// Held-out metrics for a saved estimator (`eval-estimator`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEstimatorConfig {
    pub split: String,
}

impl Default for EvalEstimatorConfig {
    fn default() -> Self {
        Self { split: "test".into() }
    }
}

impl Validate for EvalEstimatorConfig {
    fn validate(&self) -> Result<()> {
        require(
            matches!(self.split.as_str(), "train" | "val" | "test"),
            "split",
            "must be train, val or test",
        )
    }
}

/// Generation benchmark (`eval-generation`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalGenConfig {
    pub seed: u64,
    pub split: String,
    /// Cross-position (reference, target) queries drawn from the split.
    pub cases: usize,
    pub sample_steps: usize,
    pub eta: f64,
    pub panels: bool,
}

impl Default for EvalGenConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            split: "test".into(),
            cases: 60,
            sample_steps: 50,
            eta: 0.0,
            panels: true,
        }
    }
}

impl Validate for EvalGenConfig {
    fn validate(&self) -> Result<()> {
        require(self.cases > 0, "cases", "must be positive")?;
        require(self.sample_steps > 0, "sample_steps", "must be positive")?;
        require(
            matches!(self.split.as_str(), "train" | "val" | "test"),
            "split",
            "must be train, val or test",
        )
    }
}

/// Scripted end-to-end reproductions (`experiment`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `desk` for the pinned full-size runs, `smoke` for a minutes-scale
    /// shape check of the same pipeline.
    pub profile: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seed: 17, profile: "desk".into() }
    }
}

impl Validate for ExperimentConfig {
    fn validate(&self) -> Result<()> {
        require(
            matches!(self.profile.as_str(), "desk" | "smoke"),
            "profile",
            "must be desk or smoke",
        )
    }
}

pub fn split_from_str(s: &str) -> Result<tacgen_core::Split> {
    match s {
        "train" => Ok(tacgen_core::Split::Train),
        "val" => Ok(tacgen_core::Split::Val),
        "test" => Ok(tacgen_core::Split::Test),
        other => Err(bad("split", format!("must be train, val or test, got `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_reports_full_path() {
        let err = load::<Stage1Config>(None, &["dit.wobble=3".into()]).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "dit.wobble"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_reach_nested_numbers_and_validation_runs() {
        let (cfg, tree) =
            load::<Stage1Config>(None, &["optim.steps=7".into(), "dit.dim=48".into()]).unwrap();
        assert_eq!(cfg.optim.steps, 7);
        assert_eq!(cfg.dit.dim, 48);
        assert_eq!(tree["optim"]["steps"], serde_json::json!(7));
        let err = load::<Stage1Config>(None, &["identity_rate=1.5".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn file_overlay_rejects_kind_mismatch() {
        let dir = std::env::temp_dir().join(format!("tacgen-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, r#"{"dit": {"dim": "wide"}}"#).unwrap();
        let err = load::<Stage1Config>(Some(&path), &[]).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "dit.dim"),
            other => panic!("expected config error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
