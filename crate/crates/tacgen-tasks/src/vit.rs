//! Small from-scratch patch transformer shared by the force estimator, the
//! pose estimator, and the transformer classifier: patch embedding with a
//! fixed 2-D position code, pre-norm attention/MLP blocks, mean pooling.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use tacgen_diffusion::embed::{patchify, posemb_2d};
use tacgen_diffusion::net::Params;
use tacgen_nn::init::linear_init;
use tacgen_nn::{NodeId, ParamStore, Tape};

use crate::error::{Result, TaskError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { patch: 8, depth: 2, dim: 64, heads: 4 }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.depth == 0 {
            return Err(TaskError::Invalid("encoder patch and depth must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(TaskError::Invalid(format!(
                "encoder width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(TaskError::Invalid("encoder width must be a multiple of 4".into()));
        }
        Ok(())
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(TaskError::Invalid(format!(
                "{h}x{w} input is not divisible by patch size {}",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn tokens_for(&self, h: usize, w: usize) -> usize {
        (h / self.patch) * (w / self.patch)
    }
}

/// Registers all encoder weights under `prefix` (patch embed plus `depth`
/// blocks of attention and a 4x MLP).
pub fn init_vit(
    store: &mut ParamStore,
    prefix: &str,
    config: &VitConfig,
    in_channels: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let d = config.dim;
    let mut add = |store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize| {
        let (w, b) = linear_init(rng, fan_in, fan_out);
        store.add(&format!("{name}.w"), w);
        store.add(&format!("{name}.b"), b);
    };
    add(store, format!("{prefix}.patch"), in_channels * config.patch * config.patch, d);
    for i in 0..config.depth {
        for name in ["q", "k", "v", "o"] {
            add(store, format!("{prefix}.b{i}.{name}"), d, d);
        }
        add(store, format!("{prefix}.b{i}.m1"), d, 4 * d);
        add(store, format!("{prefix}.b{i}.m2"), 4 * d, d);
    }
}

/// Encoder forward: `(c, h, w)` image tensor to a `(tokens, dim)` node.
pub fn vit_tokens(
    tape: &mut Tape,
    p: &Params,
    prefix: &str,
    config: &VitConfig,
    input: &Array3<f64>,
) -> NodeId {
    let (_, h, w) = input.dim();
    let tok = patchify(input, config.patch);
    let tok = tape.constant(tok);
    let mut x = p.linear(tape, &format!("{prefix}.patch"), tok);
    let pos = posemb_2d(h / config.patch, w / config.patch, config.dim);
    let pos = tape.constant(pos);
    x = tape.add(x, pos);
    for i in 0..config.depth {
        let b = format!("{prefix}.b{i}");
        let normed = tape.layer_norm(x);
        let q = p.linear(tape, &format!("{b}.q"), normed);
        let k = p.linear(tape, &format!("{b}.k"), normed);
        let v = p.linear(tape, &format!("{b}.v"), normed);
        let att = tape.attention(q, k, v, config.heads);
        let att = p.linear(tape, &format!("{b}.o"), att);
        x = tape.add(x, att);
        let normed = tape.layer_norm(x);
        let hmid = p.linear(tape, &format!("{b}.m1"), normed);
        let hmid = tape.gelu(hmid);
        let mlp = p.linear(tape, &format!("{b}.m2"), hmid);
        x = tape.add(x, mlp);
    }
    x
}

/// Mean-pooled `(1, dim)` feature over the token axis.
pub fn vit_pooled(
    tape: &mut Tape,
    p: &Params,
    prefix: &str,
    config: &VitConfig,
    input: &Array3<f64>,
) -> NodeId {
    let tokens = vit_tokens(tape, p, prefix, config, input);
    tape.mean_rows(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tacgen_core::rng::tagged_rng;

    fn sample_input(seed: u64) -> Array3<f64> {
        let mut rng = tagged_rng(seed, "vit.test", 0);
        Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-0.5..0.5))
    }

    #[test]
    fn token_and_pooled_shapes() {
        let cfg = VitConfig { patch: 8, depth: 2, dim: 32, heads: 4 };
        cfg.validate().unwrap();
        let mut store = ParamStore::new();
        let mut rng = tagged_rng(0, "vit.init", 0);
        init_vit(&mut store, "enc", &cfg, 3, &mut rng);
        let mut tape = Tape::new();
        let p = Params::frozen(&store);
        let x = sample_input(1);
        let tokens = vit_tokens(&mut tape, &p, "enc", &cfg, &x);
        assert_eq!(tape.value(tokens).shape(), &[4, 32]);
        let pooled = vit_pooled(&mut tape, &p, "enc", &cfg, &x);
        assert_eq!(tape.value(pooled).shape(), &[1, 32]);
    }

    #[test]
    fn forward_is_deterministic_and_input_sensitive() {
        let cfg = VitConfig { patch: 8, depth: 1, dim: 16, heads: 2 };
        let mut store = ParamStore::new();
        let mut rng = tagged_rng(3, "vit.init", 0);
        init_vit(&mut store, "enc", &cfg, 3, &mut rng);
        let run = |input: &Array3<f64>| {
            let mut tape = Tape::new();
            let p = Params::frozen(&store);
            let pooled = vit_pooled(&mut tape, &p, "enc", &cfg, input);
            tape.value(pooled).to_owned()
        };
        let a = sample_input(5);
        assert_eq!(run(&a), run(&a));
        let b = sample_input(6);
        assert_ne!(run(&a), run(&b));
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        assert!(VitConfig { patch: 0, depth: 1, dim: 16, heads: 2 }.validate().is_err());
        assert!(VitConfig { patch: 8, depth: 1, dim: 30, heads: 4 }.validate().is_err());
        assert!(VitConfig { patch: 8, depth: 1, dim: 16, heads: 2 }.check_image(20, 16).is_err());
        assert!(VitConfig { patch: 8, depth: 1, dim: 16, heads: 2 }.check_image(16, 16).is_ok());
    }
}
