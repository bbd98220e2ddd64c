//! Denoiser training loops and the pair/tuple builders that assemble them
//! from a dataset manifest. All loops are single-threaded and seeded; the
//! same seed on the same machine reproduces the loss curve bit for bit.

use crate::codec::{Codec, Latent, TrainReport};
use crate::controlnet::{controlled_tokens, ControlNetWeights};
use crate::dit::{denoiser_tokens, init_generator, CondMode, DiTConfig, GeneratorWeights};
use crate::embed::patchify;
use crate::error::{DiffusionError, Result};
use crate::net::Params;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use tacgen_core::rng::tagged_rng;
use tacgen_core::{ForceVector, Manifest, Split};
use tacgen_nn::{AdamW, Tape};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Stage-1 defaults.
    pub fn stage1() -> Self {
        Self {
            steps: 20_000,
            batch: 16,
            lr_start: 1e-4,
            lr_end: 1e-5,
            weight_decay: 1e-4,
        }
    }

    /// Control-branch fine-tuning defaults.
    pub fn stage2() -> Self {
        Self {
            steps: 10_000,
            batch: 16,
            lr_start: 1e-5,
            lr_end: 1e-6,
            weight_decay: 1e-4,
        }
    }
}

/// One training example. `z_mask` and `d_force` are populated according to
/// the conditioning mode that will consume the item.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub z_ref: Latent,
    pub z_tgt: Latent,
    pub z_mask: Option<Latent>,
    pub d_force: Option<ForceVector>,
}

fn check_items(items: &[TrainItem], mode: CondMode) -> Result<(usize, usize, usize)> {
    if items.is_empty() {
        return Err(DiffusionError::InsufficientData { have: 0, need: 1 });
    }
    let dims = items[0].z_ref.dim();
    for it in items {
        if it.z_ref.dim() != dims || it.z_tgt.dim() != dims {
            return Err(DiffusionError::Invalid("training latents disagree on shape".into()));
        }
        if mode.uses_force() && it.d_force.is_none() {
            return Err(DiffusionError::Invalid("training item missing force delta".into()));
        }
        match (mode.uses_mask(), &it.z_mask) {
            (true, None) => {
                return Err(DiffusionError::Invalid("training item missing mask latent".into()))
            }
            (true, Some(m)) if m.dim() != dims => {
                return Err(DiffusionError::Invalid("training latents disagree on shape".into()))
            }
            _ => {}
        }
    }
    Ok(dims)
}

fn gaussian_latent<R: Rng>(rng: &mut R, dims: (usize, usize, usize)) -> Latent {
    let mut z = Array3::zeros(dims);
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    z
}

/// Train a denoiser of the given mode from scratch.
pub fn train_denoiser(
    items: &[TrainItem],
    config: &DiTConfig,
    schedule_config: ScheduleConfig,
    train: &TrainConfig,
    codec_fingerprint: &str,
    seed: u64,
) -> Result<(GeneratorWeights, TrainReport)> {
    let dims = check_items(items, config.mode)?;
    let schedule = NoiseSchedule::new(schedule_config.clone())?;
    let mut weights = init_generator(config, dims, schedule_config, codec_fingerprint, seed)?;
    let mut opt = AdamW::new(&weights.store, train.lr_start, train.weight_decay);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut rng = tagged_rng(seed, "gen.step", step as u64);
        let mut tape = Tape::new();
        let loss = {
            let p = Params::trainable(&weights.store);
            let mut acc = None;
            for _ in 0..train.batch {
                let it = &items[rng.random_range(0..items.len())];
                let t = rng.random_range(1..=schedule.len());
                let eps = gaussian_latent(&mut rng, dims);
                let z_noisy = schedule.add_noise(&it.z_tgt, t, &eps)?;
                let out = denoiser_tokens(
                    &mut tape,
                    &p,
                    &weights.config,
                    dims,
                    &z_noisy,
                    t,
                    &it.z_ref,
                    it.d_force,
                    it.z_mask.as_ref(),
                    None,
                );
                let target = patchify(&eps, weights.config.patch).into_dyn();
                let l1 = tape.l1_loss(out, &target, None);
                let l2 = tape.mse_loss(out, &target, None);
                let li = tape.add_scaled(l1, l2, 0.5, 0.5);
                acc = Some(match acc {
                    None => li,
                    Some(a) => tape.add(a, li),
                });
            }
            tape.scale(acc.expect("batch nonempty"), 1.0 / train.batch as f64)
        };
        losses.push(tape.scalar(loss));
        let grads = tape.backward(loss, weights.store.len());
        opt.lr = tacgen_nn::cosine_lr(step as u64, train.steps as u64, train.lr_start, train.lr_end);
        opt.step(&mut weights.store, &grads);
    }
    let final_metric = *losses.last().unwrap_or(&f64::NAN);
    Ok((weights, TrainReport { losses, final_metric }))
}

/// Fine-tune the control branch against a frozen base. Base parameters are
/// constants on the tape, so no gradient for them can exist; the checksum
/// comparison additionally proves the bits never moved.
pub fn train_stage2(
    items: &[TrainItem],
    base: &GeneratorWeights,
    cn: ControlNetWeights,
    train: &TrainConfig,
    seed: u64,
) -> Result<(ControlNetWeights, TrainReport)> {
    cn.check_base(base)?;
    let dims = check_items(items, CondMode::Hybrid)?;
    if dims != base.latent {
        return Err(DiffusionError::Invalid("training latents disagree with base model".into()));
    }
    let schedule = base.schedule();
    let base_before = base.fingerprint();
    let mut cn = cn;
    let mut opt = AdamW::new(&cn.store, train.lr_start, train.weight_decay);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut rng = tagged_rng(seed, "cn.step", step as u64);
        let mut tape = Tape::new();
        let loss = {
            let p_base = Params::frozen(&base.store);
            let p_cn = Params::trainable(&cn.store);
            let mut acc = None;
            for _ in 0..train.batch {
                let it = &items[rng.random_range(0..items.len())];
                let t = rng.random_range(1..=schedule.len());
                let eps = gaussian_latent(&mut rng, dims);
                let z_noisy = schedule.add_noise(&it.z_tgt, t, &eps)?;
                let out = controlled_tokens(
                    &mut tape,
                    &p_base,
                    &p_cn,
                    &base.config,
                    dims,
                    &z_noisy,
                    t,
                    &it.z_ref,
                    it.d_force.expect("checked"),
                    it.z_mask.as_ref().expect("checked"),
                );
                let target = patchify(&eps, base.config.patch).into_dyn();
                let l1 = tape.l1_loss(out, &target, None);
                let l2 = tape.mse_loss(out, &target, None);
                let li = tape.add_scaled(l1, l2, 0.5, 0.5);
                acc = Some(match acc {
                    None => li,
                    Some(a) => tape.add(a, li),
                });
            }
            tape.scale(acc.expect("batch nonempty"), 1.0 / train.batch as f64)
        };
        losses.push(tape.scalar(loss));
        let grads = tape.backward(loss, cn.store.len());
        opt.lr = tacgen_nn::cosine_lr(step as u64, train.steps as u64, train.lr_start, train.lr_end);
        opt.step(&mut cn.store, &grads);
    }
    if base.fingerprint() != base_before {
        return Err(DiffusionError::FrozenBaseChanged(base_before));
    }
    let final_metric = *losses.last().unwrap_or(&f64::NAN);
    Ok((cn, TrainReport { losses, final_metric }))
}

/// Latent cache over manifest samples: encoded background-subtracted images
/// plus per-position encoded masks.
pub struct LatentBank {
    pub by_id: BTreeMap<String, Latent>,
    pub mask_by_path: BTreeMap<String, Latent>,
}

pub fn encode_split(manifest: &Manifest, codec: &Codec, split: Split) -> Result<LatentBank> {
    let mut by_id = BTreeMap::new();
    let mut mask_by_path = BTreeMap::new();
    for s in manifest.split_samples(split) {
        let img = manifest.load_image(s)?;
        let bg = manifest.load_background(s)?;
        let diff = tacgen_core::image::subtract_background(&img, &bg)?;
        by_id.insert(s.id.clone(), codec.encode_image(&diff)?);
        if !mask_by_path.contains_key(&s.mask) {
            let mask = manifest.load_mask(s)?;
            mask_by_path.insert(s.mask.clone(), codec.encode_mask(&mask)?);
        }
    }
    Ok(LatentBank { by_id, mask_by_path })
}

struct PositionGroup<'a> {
    object: &'a str,
    mask_path: &'a str,
    /// (sample id, force) of each contact frame at this position.
    frames: Vec<(&'a str, ForceVector)>,
}

fn contact_groups(manifest: &Manifest, split: Split) -> Vec<PositionGroup<'_>> {
    let mut groups: BTreeMap<(&str, &str), Vec<(&str, ForceVector)>> = BTreeMap::new();
    for s in manifest.split_samples(split) {
        if s.force.fz <= 0.0 {
            continue;
        }
        groups
            .entry((s.object_id.as_str(), s.mask.as_str()))
            .or_default()
            .push((s.id.as_str(), s.force));
    }
    groups
        .into_iter()
        .map(|((object, mask_path), frames)| PositionGroup {
            object,
            mask_path,
            frames,
        })
        .collect()
}

/// Same-position force pairs for stage-1 training. A slice of draws are
/// identity pairs (zero force delta) so the model learns the identity map.
pub fn build_stage1_pairs(
    manifest: &Manifest,
    bank: &LatentBank,
    split: Split,
    n_pairs: usize,
    identity_rate: f64,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    let groups = contact_groups(manifest, split);
    let usable: Vec<&PositionGroup> = groups.iter().filter(|g| g.frames.len() >= 2).collect();
    if usable.is_empty() {
        let lonely = groups
            .first()
            .map(|g| g.frames[0].0.to_string())
            .unwrap_or_else(|| "<empty split>".to_string());
        return Err(DiffusionError::NoPartner { id: lonely });
    }
    let mut rng = tagged_rng(seed, "pairs.stage1", 0);
    let mut items = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let g = usable[rng.random_range(0..usable.len())];
        let i = rng.random_range(0..g.frames.len());
        let identity = rng.random_bool(identity_rate);
        let j = if identity {
            i
        } else {
            let mut j = rng.random_range(0..g.frames.len() - 1);
            if j >= i {
                j += 1;
            }
            j
        };
        let (ref_id, f_i) = g.frames[i];
        let (tgt_id, f_t) = g.frames[j];
        items.push(TrainItem {
            z_ref: bank.by_id[ref_id].clone(),
            z_tgt: bank.by_id[tgt_id].clone(),
            z_mask: None,
            d_force: Some(ForceVector::delta(f_t, f_i)),
        });
    }
    Ok(items)
}

/// Cross-position tuples for the control stage and the joint baseline:
/// reference frame at one position, target frame plus its mask at another
/// position of the same object. `same_position_rate` mixes in same-position
/// tuples so position control also sees the no-move case.
pub fn build_masked_tuples(
    manifest: &Manifest,
    bank: &LatentBank,
    split: Split,
    n_tuples: usize,
    same_position_rate: f64,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    let groups = contact_groups(manifest, split);
    let mut by_object: BTreeMap<&str, Vec<&PositionGroup>> = BTreeMap::new();
    for g in &groups {
        by_object.entry(g.object).or_default().push(g);
    }
    let objects: Vec<&str> = by_object
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(k, _)| *k)
        .collect();
    if objects.is_empty() {
        return Err(DiffusionError::Invalid(
            "no object has two contact positions in this split".into(),
        ));
    }
    let mut rng = tagged_rng(seed, "tuples.masked", 0);
    let mut items = Vec::with_capacity(n_tuples);
    for _ in 0..n_tuples {
        let obj = objects[rng.random_range(0..objects.len())];
        let positions = &by_object[obj];
        let a = rng.random_range(0..positions.len());
        let b = if rng.random_bool(same_position_rate) {
            a
        } else {
            let mut b = rng.random_range(0..positions.len() - 1);
            if b >= a {
                b += 1;
            }
            b
        };
        let (ref_id, f_i) = positions[a].frames[rng.random_range(0..positions[a].frames.len())];
        let (tgt_id, f_t) = positions[b].frames[rng.random_range(0..positions[b].frames.len())];
        items.push(TrainItem {
            z_ref: bank.by_id[ref_id].clone(),
            z_tgt: bank.by_id[tgt_id].clone(),
            z_mask: Some(bank.mask_by_path[positions[b].mask_path].clone()),
            d_force: Some(ForceVector::delta(f_t, f_i)),
        });
    }
    Ok(items)
}

/// Convert masked tuples into pipeline-baseline items: the reference latent
/// is replaced by a stage-1 generation at the reference position carrying
/// the target force, and the force conditioning is dropped.
pub fn build_separate_tuples(
    tuples: &[TrainItem],
    stage1: &GeneratorWeights,
    sample_steps: usize,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    let mut out = Vec::with_capacity(tuples.len());
    for (k, it) in tuples.iter().enumerate() {
        let cond = crate::sampler::SampleCond {
            z_ref: &it.z_ref,
            d_force: it.d_force,
            z_mask: None,
        };
        let z_gen = crate::sampler::ddim_sample_latent(
            crate::sampler::DenoiserRef::Plain(stage1),
            cond,
            sample_steps,
            0.0,
            seed,
            &format!("separate.{k}"),
        )?;
        out.push(TrainItem {
            z_ref: z_gen,
            z_tgt: it.z_tgt.clone(),
            z_mask: it.z_mask.clone(),
            d_force: None,
        });
    }
    Ok(out)
}
