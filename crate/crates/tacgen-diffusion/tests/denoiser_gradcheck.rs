//! Finite-difference validation of the full denoiser forward pass: every
//! weight of a small transformer (patch embed, timestep and force MLPs,
//! attention, MLP blocks, modulation, final projection) is probed against
//! central differences through the complete graph.

use ndarray::ArrayD;
use rand::Rng;
use tacgen_core::rng::tagged_rng;
use tacgen_core::ForceVector;
use tacgen_diffusion::dit::denoiser_tokens;
use tacgen_diffusion::net::Params;
use tacgen_diffusion::schedule::ScheduleConfig;
use tacgen_diffusion::{init_generator, CondMode, DiTConfig, Latent};
use tacgen_nn::check_gradients;

const TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn randn_latent(dims: (usize, usize, usize), seed: u64) -> Latent {
    let mut rng = tagged_rng(seed, "gradcheck.latent", 0);
    Latent::from_shape_fn(dims, |_| rng.sample(rand_distr::StandardNormal))
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let config = DiTConfig {
        patch: 2,
        depth: 2,
        dim: 16,
        heads: 2,
        mode: CondMode::ForceOnly,
    };
    let latent = (4usize, 8usize, 8usize);
    let schedule = ScheduleConfig { steps: 50, ..ScheduleConfig::default() };
    let mut gen = init_generator(&config, latent, schedule, "identity:f1:c3", 11).unwrap();

    // Zero-initialized modulation and output layers block gradient flow to
    // everything upstream of them, so shake every tensor before probing.
    let mut rng = tagged_rng(11, "gradcheck.shake", 0);
    for id in gen.store.ids().collect::<Vec<_>>() {
        gen.store
            .get_mut(id)
            .mapv_inplace(|v| v + 0.05 * rng.random_range(-1.0..1.0));
    }

    let z_t = randn_latent(latent, 1);
    let z_ref = randn_latent(latent, 2);
    let force = ForceVector { fx: 0.3, fy: -0.2, fz: 4.0 };
    let n_tok = (latent.1 / config.patch) * (latent.2 / config.patch);
    let out_dim = config.patch * config.patch * latent.0;
    let mut trng = tagged_rng(11, "gradcheck.target", 0);
    let target: ArrayD<f64> =
        ArrayD::from_shape_fn(vec![n_tok, out_dim], |_| trng.sample(rand_distr::StandardNormal));

    let cfg = config;
    let report = check_gradients(
        &mut gen.store,
        |tape, store| {
            let p = Params::trainable(store);
            let out =
                denoiser_tokens(tape, &p, &cfg, latent, &z_t, 7, &z_ref, Some(force), None, None);
            let l1 = tape.l1_loss(out, &target, None);
            let l2 = tape.mse_loss(out, &target, None);
            tape.add_scaled(l1, l2, 0.5, 0.5)
        },
        3,
        H,
        99,
    );

    assert!(
        report.checked >= 100,
        "probed only {} coordinates, need at least 100",
        report.checked
    );
    assert!(
        report.max_rel_err <= TOL,
        "max rel err {} exceeds {} at {:?}",
        report.max_rel_err,
        TOL,
        report.worst
    );
}
