//! Generation benchmark shared by `eval-generation`, the scripted
//! experiments and the test suite: deterministic (reference, target) queries
//! drawn from a manifest split, and one generation routine per model family
//! so all families answer the identical queries.

use std::collections::BTreeMap;

use rand::Rng;
use tacgen_core::rng::tagged_rng;
use tacgen_core::{ContactMask, ForceVector, Manifest, SampleRecord, Split, TactileImage};
use tacgen_diffusion::{
    ddim_sample_latent, generate, generate_positioned, Codec, ControlNetWeights, DenoiserRef,
    GeneratorWeights, SampleCond,
};

use crate::error::{CliError, Result};

/// One benchmark query: reproduce the target frame from the reference frame
/// given the target's force and (for positioned models) its contact mask.
#[derive(Debug, Clone)]
pub struct BenchCase {
    pub ref_id: String,
    pub tgt_id: String,
}

fn contact_records(manifest: &Manifest, split: Split) -> Vec<&SampleRecord> {
    manifest.split_samples(split).filter(|s| s.force.fz > 0.0).collect()
}

/// Groups a split's contact frames by (object, position); the mask path
/// identifies the position.
fn position_groups<'a>(
    manifest: &'a Manifest,
    split: Split,
) -> BTreeMap<(&'a str, &'a str), Vec<&'a SampleRecord>> {
    let mut groups: BTreeMap<(&str, &str), Vec<&SampleRecord>> = BTreeMap::new();
    for s in contact_records(manifest, split) {
        groups.entry((s.object_id.as_str(), s.mask.as_str())).or_default().push(s);
    }
    groups
}

/// Same-position queries: reference and target differ only in force.
pub fn force_cases(manifest: &Manifest, split: Split, n: usize, seed: u64) -> Result<Vec<BenchCase>> {
    let groups: Vec<Vec<&SampleRecord>> =
        position_groups(manifest, split).into_values().filter(|g| g.len() >= 2).collect();
    if groups.is_empty() {
        return Err(CliError::run(format!(
            "split {} has no position with two frames",
            split.as_str()
        )));
    }
    let mut rng = tagged_rng(seed, "bench.force", 0);
    let mut cases = Vec::with_capacity(n);
    for _ in 0..n {
        let g = &groups[rng.random_range(0..groups.len())];
        let i = rng.random_range(0..g.len());
        let mut j = rng.random_range(0..g.len() - 1);
        if j >= i {
            j += 1;
        }
        cases.push(BenchCase { ref_id: g[i].id.clone(), tgt_id: g[j].id.clone() });
    }
    Ok(cases)
}

/// Cross-position queries within an object: the target sits at a different
/// contact position than the reference.
pub fn position_cases(
    manifest: &Manifest,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<Vec<BenchCase>> {
    let mut by_object: BTreeMap<&str, Vec<Vec<&SampleRecord>>> = BTreeMap::new();
    for ((object, _), g) in position_groups(manifest, split) {
        by_object.entry(object).or_default().push(g);
    }
    let objects: Vec<&Vec<Vec<&SampleRecord>>> =
        by_object.values().filter(|v| v.len() >= 2).collect();
    if objects.is_empty() {
        return Err(CliError::run(format!(
            "split {} has no object with two contact positions",
            split.as_str()
        )));
    }
    let mut rng = tagged_rng(seed, "bench.position", 0);
    let mut cases = Vec::with_capacity(n);
    for _ in 0..n {
        let positions = objects[rng.random_range(0..objects.len())];
        let a = rng.random_range(0..positions.len());
        let mut b = rng.random_range(0..positions.len() - 1);
        if b >= a {
            b += 1;
        }
        let r = positions[a][rng.random_range(0..positions[a].len())];
        let t = positions[b][rng.random_range(0..positions[b].len())];
        cases.push(BenchCase { ref_id: r.id.clone(), tgt_id: t.id.clone() });
    }
    Ok(cases)
}

/// A generation model family under evaluation. All variants borrow loaded
/// weights; the label names the family in reports.
pub enum ModelUnderTest<'a> {
    /// Force stage alone (same-position queries only).
    ForceStage { stage1: &'a GeneratorWeights },
    /// Force stage plus control branch in one controlled sampling pass.
    TwoStage { base: &'a GeneratorWeights, cn: &'a ControlNetWeights },
    /// Joint force+mask trunk.
    Hybrid { weights: &'a GeneratorWeights },
    /// Pipeline: force-stage output feeds a position-only model.
    Separate { stage1: &'a GeneratorWeights, position: &'a GeneratorWeights },
}

impl ModelUnderTest<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            ModelUnderTest::ForceStage { .. } => "force_stage",
            ModelUnderTest::TwoStage { .. } => "two_stage",
            ModelUnderTest::Hybrid { .. } => "hybrid",
            ModelUnderTest::Separate { .. } => "separate",
        }
    }
}

pub struct CaseData {
    pub reference: TactileImage,
    pub target: TactileImage,
    pub background: tacgen_core::BackgroundImage,
    pub f_ref: ForceVector,
    pub f_tgt: ForceVector,
    pub mask: ContactMask,
}

pub fn load_case(manifest: &Manifest, case: &BenchCase) -> Result<CaseData> {
    let r = manifest
        .sample_by_id(&case.ref_id)
        .ok_or_else(|| CliError::run(format!("no sample `{}`", case.ref_id)))?;
    let t = manifest
        .sample_by_id(&case.tgt_id)
        .ok_or_else(|| CliError::run(format!("no sample `{}`", case.tgt_id)))?;
    Ok(CaseData {
        reference: manifest.load_image(r)?,
        target: manifest.load_image(t)?,
        background: manifest.load_background(r)?,
        f_ref: r.force,
        f_tgt: t.force,
        mask: manifest.load_mask(t)?,
    })
}

/// Runs one query through one model family. `sample_id` seeds the sampling
/// noise, so a fixed (seed, sample_id) pair reproduces the output exactly.
#[allow(clippy::too_many_arguments)]
pub fn run_case(
    model: &ModelUnderTest,
    codec: &Codec,
    data: &CaseData,
    steps: usize,
    eta: f64,
    seed: u64,
    sample_id: &str,
) -> Result<TactileImage> {
    let out = match model {
        ModelUnderTest::ForceStage { stage1 } => generate(
            stage1,
            codec,
            &data.reference,
            &data.background,
            data.f_ref,
            data.f_tgt,
            steps,
            eta,
            seed,
            sample_id,
        )?,
        ModelUnderTest::TwoStage { base, cn } => generate_positioned(
            base,
            cn,
            codec,
            &data.reference,
            &data.background,
            data.f_ref,
            data.f_tgt,
            &data.mask,
            steps,
            eta,
            seed,
            sample_id,
        )?,
        ModelUnderTest::Hybrid { weights } => {
            let diff = tacgen_core::image::subtract_background(&data.reference, &data.background)?;
            let z_ref = codec.encode_image(&diff)?;
            let z_mask = codec.encode_mask(&data.mask)?;
            let cond = SampleCond {
                z_ref: &z_ref,
                d_force: Some(ForceVector::delta(data.f_tgt, data.f_ref)),
                z_mask: Some(&z_mask),
            };
            let z0 =
                ddim_sample_latent(DenoiserRef::Plain(weights), cond, steps, eta, seed, sample_id)?;
            let out_diff = codec.decode_image(&z0)?;
            tacgen_core::image::add_background(&out_diff, &data.background)?
        }
        ModelUnderTest::Separate { stage1, position } => {
            let diff = tacgen_core::image::subtract_background(&data.reference, &data.background)?;
            let z_ref = codec.encode_image(&diff)?;
            let force_cond = SampleCond {
                z_ref: &z_ref,
                d_force: Some(ForceVector::delta(data.f_tgt, data.f_ref)),
                z_mask: None,
            };
            let z_force = ddim_sample_latent(
                DenoiserRef::Plain(stage1),
                force_cond,
                steps,
                eta,
                seed,
                &format!("{sample_id}.force"),
            )?;
            let z_mask = codec.encode_mask(&data.mask)?;
            let pos_cond = SampleCond { z_ref: &z_force, d_force: None, z_mask: Some(&z_mask) };
            let z0 = ddim_sample_latent(
                DenoiserRef::Plain(position),
                pos_cond,
                steps,
                eta,
                seed,
                sample_id,
            )?;
            let out_diff = codec.decode_image(&z0)?;
            tacgen_core::image::add_background(&out_diff, &data.background)?
        }
    };
    Ok(out)
}

/// Answers every query with every model and collects labelled pairs for the
/// metric report.
pub fn run_benchmark(
    manifest: &Manifest,
    cases: &[BenchCase],
    models: &[ModelUnderTest],
    codec: &Codec,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Vec<tacgen_tasks::GenEvalEntry>> {
    let mut entries = Vec::with_capacity(cases.len() * models.len());
    for (k, case) in cases.iter().enumerate() {
        let data = load_case(manifest, case)?;
        for model in models {
            let generated = run_case(
                model,
                codec,
                &data,
                steps,
                eta,
                seed,
                &format!("bench.{}.{k}", model.label()),
            )?;
            entries.push(tacgen_tasks::GenEvalEntry {
                model: model.label().to_string(),
                generated,
                reference: data.target.clone(),
            });
        }
    }
    Ok(entries)
}
