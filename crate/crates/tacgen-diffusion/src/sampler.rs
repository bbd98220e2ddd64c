//! Strided deterministic sampling and the image-level generate entry points.

use crate::codec::{Codec, Latent};
use crate::controlnet::{predict_noise_controlled, ControlNetWeights};
use crate::dit::GeneratorWeights;
use crate::error::{DiffusionError, Result};
use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};
use tacgen_core::rng::id_rng;
use tacgen_core::{BackgroundImage, ContactMask, ForceVector, TactileImage};

pub const DEFAULT_SAMPLE_STEPS: usize = 100;

/// Clean-latent estimates are clamped to this band during sampling. Encoded
/// real latents are standardized and stay well inside it, so the clamp only
/// arrests feedback between an off-manifold trajectory and the noise
/// predictions it provokes.
pub const X0_CLAMP: f64 = 8.0;

#[derive(Clone, Copy)]
pub enum DenoiserRef<'a> {
    Plain(&'a GeneratorWeights),
    Controlled {
        base: &'a GeneratorWeights,
        cn: &'a ControlNetWeights,
    },
}

impl<'a> DenoiserRef<'a> {
    fn base(&self) -> &'a GeneratorWeights {
        match self {
            DenoiserRef::Plain(g) => g,
            DenoiserRef::Controlled { base, .. } => base,
        }
    }
}

#[derive(Clone, Copy)]
pub struct SampleCond<'a> {
    pub z_ref: &'a Latent,
    pub d_force: Option<ForceVector>,
    /// Mask latent; consumed by the trunk in joint modes and by the control
    /// branch in controlled sampling.
    pub z_mask: Option<&'a Latent>,
}

/// Reverse diffusion over a uniformly strided sub-schedule. `eta = 0` is
/// fully deterministic given (seed, sample_id); the returned latent is the
/// final clean estimate.
pub fn ddim_sample_latent(
    model: DenoiserRef,
    cond: SampleCond,
    steps: usize,
    eta: f64,
    seed: u64,
    sample_id: &str,
) -> Result<Latent> {
    let base = model.base();
    let schedule = base.schedule();
    let ts = schedule.sub_schedule(steps)?;
    if eta < 0.0 {
        return Err(DiffusionError::Invalid(format!("eta must be >= 0, got {eta}")));
    }
    if let DenoiserRef::Controlled { base, cn } = model {
        cn.check_base(base)?;
        if cond.z_mask.is_none() {
            return Err(DiffusionError::BadMode {
                mode: "controlled",
                what: "mask latent required",
            });
        }
    }
    let mut rng = id_rng(seed, "ddim.init", sample_id);
    let mut z: Latent = {
        let mut z = Array3::zeros(base.latent);
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        z
    };
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps_hat = match model {
            DenoiserRef::Plain(g) => {
                let z_mask = if g.config.mode.uses_mask() { cond.z_mask } else { None };
                g.predict_noise(&z, t, cond.z_ref, cond.d_force, z_mask, None)?
            }
            DenoiserRef::Controlled { base, cn } => predict_noise_controlled(
                base,
                cn,
                &z,
                t,
                cond.z_ref,
                cond.d_force.ok_or(DiffusionError::BadMode {
                    mode: "controlled",
                    what: "force delta required",
                })?,
                cond.z_mask.expect("checked above"),
            )?,
        };
        let x0 = schedule
            .predict_x0(&z, t, &eps_hat)?
            .mapv(|v| v.clamp(-X0_CLAMP, X0_CLAMP));
        let c = schedule.ddim_step_coefficients(t, t_prev, eta)?;
        let mut next = &x0 * c.coef_x0 + &z * c.coef_xt;
        if c.noise_std > 0.0 {
            for v in next.iter_mut() {
                let xi: f64 = StandardNormal.sample(&mut rng);
                *v += c.noise_std * xi;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NanDetected { step_index: i, t });
        }
        z = next;
    }
    Ok(z)
}

fn check_codec(weights: &GeneratorWeights, codec: &Codec) -> Result<()> {
    let actual = codec.fingerprint();
    if actual != weights.codec_fingerprint {
        return Err(DiffusionError::FingerprintMismatch {
            expected: weights.codec_fingerprint.clone(),
            actual,
        });
    }
    Ok(())
}

/// Force-controlled generation: reference frame in, same-position frame at
/// the target force out.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    weights: &GeneratorWeights,
    codec: &Codec,
    reference: &TactileImage,
    background: &BackgroundImage,
    f_initial: ForceVector,
    f_target: ForceVector,
    steps: usize,
    eta: f64,
    seed: u64,
    sample_id: &str,
) -> Result<TactileImage> {
    check_codec(weights, codec)?;
    let diff = tacgen_core::image::subtract_background(reference, background)?;
    let z_ref = codec.encode_image(&diff)?;
    let d_force = ForceVector::delta(f_target, f_initial);
    let cond = SampleCond {
        z_ref: &z_ref,
        d_force: Some(d_force),
        z_mask: None,
    };
    let z0 = ddim_sample_latent(DenoiserRef::Plain(weights), cond, steps, eta, seed, sample_id)?;
    let out_diff = codec.decode_image(&z0)?;
    Ok(tacgen_core::image::add_background(&out_diff, background)?)
}

/// Force- and position-controlled generation through the control branch.
#[allow(clippy::too_many_arguments)]
pub fn generate_positioned(
    base: &GeneratorWeights,
    cn: &ControlNetWeights,
    codec: &Codec,
    reference: &TactileImage,
    background: &BackgroundImage,
    f_initial: ForceVector,
    f_target: ForceVector,
    mask: &ContactMask,
    steps: usize,
    eta: f64,
    seed: u64,
    sample_id: &str,
) -> Result<TactileImage> {
    check_codec(base, codec)?;
    let diff = tacgen_core::image::subtract_background(reference, background)?;
    let z_ref = codec.encode_image(&diff)?;
    let z_mask = codec.encode_mask(mask)?;
    let d_force = ForceVector::delta(f_target, f_initial);
    let cond = SampleCond {
        z_ref: &z_ref,
        d_force: Some(d_force),
        z_mask: Some(&z_mask),
    };
    let z0 = ddim_sample_latent(DenoiserRef::Controlled { base, cn }, cond, steps, eta, seed, sample_id)?;
    let out_diff = codec.decode_image(&z0)?;
    Ok(tacgen_core::image::add_background(&out_diff, background)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{init_generator, CondMode, DiTConfig};
    use crate::schedule::ScheduleConfig;
    use rand::Rng;
    use tacgen_core::rng::tagged_rng;

    fn tiny_base(seed: u64) -> GeneratorWeights {
        let config = DiTConfig {
            patch: 2,
            depth: 2,
            dim: 16,
            heads: 2,
            mode: CondMode::ForceOnly,
        };
        let mut g = init_generator(
            &config,
            (3, 4, 4),
            ScheduleConfig { steps: 30, beta_start: 1e-4, beta_end: 2e-2 },
            "identity:f1:c3",
            seed,
        )
        .unwrap();
        let mut rng = tagged_rng(seed, "test.fill", 0);
        for id in g.store.ids().collect::<Vec<_>>() {
            g.store.get_mut(id).mapv_inplace(|v| v + 0.02 * rng.random_range(-1.0..1.0));
        }
        g
    }

    fn rand_latent(dims: (usize, usize, usize), seed: u64) -> Latent {
        let mut rng = tacgen_core::rng::stream_rng(seed, 5);
        Array3::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn eta_zero_sampling_is_bit_identical_across_runs() {
        let g = tiny_base(4);
        let z_ref = rand_latent(g.latent, 9);
        let cond = SampleCond {
            z_ref: &z_ref,
            d_force: Some(ForceVector { fx: 0.0, fy: 0.0, fz: 3.0 }),
            z_mask: None,
        };
        let a = ddim_sample_latent(DenoiserRef::Plain(&g), cond, 10, 0.0, 77, "s0").unwrap();
        let b = ddim_sample_latent(DenoiserRef::Plain(&g), cond, 10, 0.0, 77, "s0").unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        // A different sample id must decorrelate the initial noise.
        let c = ddim_sample_latent(DenoiserRef::Plain(&g), cond, 10, 0.0, 77, "s1").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn step_count_bounds_are_enforced() {
        let g = tiny_base(5);
        let z_ref = rand_latent(g.latent, 1);
        let cond = SampleCond {
            z_ref: &z_ref,
            d_force: Some(ForceVector::ZERO),
            z_mask: None,
        };
        assert!(ddim_sample_latent(DenoiserRef::Plain(&g), cond, 0, 0.0, 1, "x").is_err());
        assert!(ddim_sample_latent(DenoiserRef::Plain(&g), cond, 31, 0.0, 1, "x").is_err());
        assert!(ddim_sample_latent(DenoiserRef::Plain(&g), cond, 30, 0.0, 1, "x").is_ok());
    }

    #[test]
    fn generate_shapes_and_fingerprint_gate() {
        let g = tiny_base(6);
        let codec = Codec::identity();
        let img = TactileImage::from_f64(&Array3::from_elem((4, 4, 3), 0.55));
        let bg = BackgroundImage(TactileImage::from_f64(&Array3::from_elem((4, 4, 3), 0.5)));
        let out = generate(
            &g,
            &codec,
            &img,
            &bg,
            ForceVector { fx: 0.0, fy: 0.0, fz: 2.0 },
            ForceVector { fx: 0.0, fy: 0.0, fz: 6.0 },
            5,
            0.0,
            123,
            "gen0",
        )
        .unwrap();
        assert_eq!(out.height(), 4);
        assert_eq!(out.width(), 4);

        let mut wrong = tiny_base(7);
        wrong.codec_fingerprint = "other".into();
        assert!(matches!(
            generate(&wrong, &codec, &img, &bg, ForceVector::ZERO, ForceVector::ZERO, 5, 0.0, 1, "g"),
            Err(DiffusionError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn untrained_control_branch_generates_identically_to_base() {
        let g = tiny_base(8);
        let cn = crate::controlnet::init_controlnet(&g).unwrap();
        let codec = Codec::identity();
        let img = TactileImage::from_f64(&Array3::from_shape_fn((4, 4, 3), |(y, x, c)| {
            0.4 + 0.1 * ((y + x + c) % 3) as f64
        }));
        let bg = BackgroundImage(TactileImage::from_f64(&Array3::from_elem((4, 4, 3), 0.5)));
        let mut mask = ContactMask::zeros(4, 4);
        mask.set(1, 1, 1);
        mask.set(2, 1, 1);
        let fi = ForceVector { fx: 0.0, fy: 0.0, fz: 2.0 };
        let ft = ForceVector { fx: 0.0, fy: 0.0, fz: 5.0 };
        let plain = generate(&g, &codec, &img, &bg, fi, ft, 6, 0.0, 9, "p").unwrap();
        let positioned =
            generate_positioned(&g, &cn, &codec, &img, &bg, fi, ft, &mask, 6, 0.0, 9, "p").unwrap();
        assert_eq!(plain.mean_abs_diff(&positioned), 0.0);
    }

    #[test]
    fn eta_one_full_schedule_runs_and_stays_finite() {
        let g = tiny_base(10);
        let z_ref = rand_latent(g.latent, 2);
        let cond = SampleCond {
            z_ref: &z_ref,
            d_force: Some(ForceVector { fx: 0.1, fy: 0.0, fz: 1.0 }),
            z_mask: None,
        };
        let z = ddim_sample_latent(DenoiserRef::Plain(&g), cond, 30, 1.0, 3, "full").unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }
}
