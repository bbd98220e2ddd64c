//! Mask-conditioned control branch: a trainable copy of the first half of a
//! frozen force-conditioned denoiser. The contact-mask latent enters only
//! the copy, through a zero-initialized adapter; each copied block feeds a
//! zero-initialized projection whose output is added to the corresponding
//! frozen block's output. Zero initialization makes the wrapped model equal
//! the frozen base exactly until training moves it.

use crate::codec::Latent;
use crate::dit::{block_forward, cond_forward, embed_forward, trunk_tokens, DiTConfig, GeneratorWeights};
use crate::embed::{patchify, unpatchify};
use crate::error::{DiffusionError, Result};
use crate::net::Params;
use ndarray::{Array2, ArrayD};
use tacgen_core::ForceVector;
use tacgen_nn::{NodeId, ParamStore, Tape};

const BLOCK_TENSORS: [&str; 14] = [
    "mod.w", "mod.b", "q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b", "m1.w", "m1.b",
    "m2.w", "m2.b",
];

#[derive(Debug, Clone)]
pub struct ControlNetWeights {
    pub store: ParamStore,
    pub config: DiTConfig,
    pub latent: (usize, usize, usize),
    /// Fingerprint of the frozen base this branch was initialized from.
    pub base_fingerprint: String,
}

pub fn init_controlnet(base: &GeneratorWeights) -> Result<ControlNetWeights> {
    base.config.validate()?;
    if base.config.mode.uses_mask() {
        return Err(DiffusionError::BadMode {
            mode: base.config.mode.name(),
            what: "control branch wraps the force-only model",
        });
    }
    let d = base.config.dim;
    let (c, _, _) = base.latent;
    let half = base.config.depth / 2;
    let mut store = ParamStore::new();
    store.add("c.adapter.w", Array2::<f64>::zeros((base.config.patch * base.config.patch * c, d)));
    store.add("c.adapter.b", Array2::<f64>::zeros((1, d)));
    for i in 0..half {
        for tensor in BLOCK_TENSORS {
            let src = base
                .store
                .id_of(&format!("g.b{i}.{tensor}"))
                .expect("base block tensor exists");
            store.add(&format!("c.b{i}.{tensor}"), base.store.get(src).clone());
        }
        store.add(&format!("c.p{i}.w"), Array2::<f64>::zeros((d, d)));
        store.add(&format!("c.p{i}.b"), Array2::<f64>::zeros((1, d)));
    }
    Ok(ControlNetWeights {
        store,
        config: base.config.clone(),
        latent: base.latent,
        base_fingerprint: base.fingerprint(),
    })
}

impl ControlNetWeights {
    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn check_base(&self, base: &GeneratorWeights) -> Result<()> {
        let actual = base.fingerprint();
        if actual != self.base_fingerprint {
            return Err(DiffusionError::BaseFingerprintMismatch {
                expected: self.base_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut store = self.store.clone();
        store.meta.insert("kind".into(), "controlnet".into());
        store
            .meta
            .insert("config".into(), serde_json::to_string(&self.config).expect("serializes"));
        store.meta.insert(
            "latent".into(),
            serde_json::to_string(&self.latent).expect("serializes"),
        );
        store.meta.insert("base_fingerprint".into(), self.base_fingerprint.clone());
        store.save(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        if store.meta.get("kind").map(String::as_str) != Some("controlnet") {
            return Err(DiffusionError::Invalid("not a control weights file".into()));
        }
        let config: DiTConfig = serde_json::from_str(
            store
                .meta
                .get("config")
                .ok_or_else(|| DiffusionError::Invalid("control file missing config".into()))?,
        )
        .map_err(|e| DiffusionError::Invalid(format!("bad control config: {e}")))?;
        let latent: (usize, usize, usize) = serde_json::from_str(
            store
                .meta
                .get("latent")
                .ok_or_else(|| DiffusionError::Invalid("control file missing latent dims".into()))?,
        )
        .map_err(|e| DiffusionError::Invalid(format!("bad latent dims: {e}")))?;
        let base_fingerprint = store
            .meta
            .get("base_fingerprint")
            .ok_or_else(|| DiffusionError::Invalid("control file missing base fingerprint".into()))?
            .clone();
        Ok(Self {
            store,
            config,
            latent,
            base_fingerprint,
        })
    }
}

/// Residual nodes from the control branch; `tokens` must be the base
/// model's block-0 input for the same tape.
pub fn control_residual_nodes(
    tape: &mut Tape,
    p_cn: &Params,
    config: &DiTConfig,
    patch: usize,
    z_mask: &Latent,
    tokens: NodeId,
    cond_act: NodeId,
) -> Vec<NodeId> {
    let mask_tokens = tape.constant(patchify(z_mask, patch));
    let adapted = p_cn.linear(tape, "c.adapter", mask_tokens);
    let mut x = tape.add(tokens, adapted);
    let mut residuals = Vec::with_capacity(config.depth / 2);
    for i in 0..config.depth / 2 {
        x = block_forward(tape, p_cn, &format!("c.b{i}"), config.dim, config.heads, x, cond_act);
        residuals.push(p_cn.linear(tape, &format!("c.p{i}"), x));
    }
    residuals
}

/// Wrapped forward: frozen trunk plus control residuals, returning the
/// predicted-noise token node.
#[allow(clippy::too_many_arguments)]
pub fn controlled_tokens(
    tape: &mut Tape,
    p_base: &Params,
    p_cn: &Params,
    base_config: &DiTConfig,
    latent: (usize, usize, usize),
    z_t: &Latent,
    t: usize,
    z_ref: &Latent,
    d_force: ForceVector,
    z_mask: &Latent,
) -> NodeId {
    let cond = cond_forward(tape, p_base, base_config, t, Some(d_force));
    let cond_act = tape.silu(cond);
    let tokens = embed_forward(tape, p_base, base_config, latent, z_t, z_ref, None);
    let residuals = control_residual_nodes(
        tape,
        p_cn,
        base_config,
        base_config.patch,
        z_mask,
        tokens,
        cond_act,
    );
    trunk_tokens(tape, p_base, base_config, tokens, cond_act, Some(&residuals))
}

/// Evaluation-mode wrapped prediction.
pub fn predict_noise_controlled(
    base: &GeneratorWeights,
    cn: &ControlNetWeights,
    z_t: &Latent,
    t: usize,
    z_ref: &Latent,
    d_force: ForceVector,
    z_mask: &Latent,
) -> Result<Latent> {
    for (ctx, z) in [("noisy latent", z_t), ("reference latent", z_ref), ("mask latent", z_mask)] {
        if z.dim() != base.latent {
            return Err(DiffusionError::ShapeMismatch {
                context: ctx,
                expected: vec![base.latent.0, base.latent.1, base.latent.2],
                actual: z.shape().to_vec(),
            });
        }
    }
    if t == 0 || t > base.schedule.steps {
        return Err(DiffusionError::StepOutOfRange {
            t,
            max: base.schedule.steps,
        });
    }
    let mut tape = Tape::new();
    let p_base = Params::frozen(&base.store);
    let p_cn = Params::frozen(&cn.store);
    let out = controlled_tokens(
        &mut tape,
        &p_base,
        &p_cn,
        &base.config,
        base.latent,
        z_t,
        t,
        z_ref,
        d_force,
        z_mask,
    );
    let toks = tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("token matrix");
    let (c, h, w) = base.latent;
    Ok(unpatchify(&toks, base.config.patch, c, h, w))
}

/// Evaluation-mode residual inspection (one array per controlled block).
#[allow(clippy::too_many_arguments)]
pub fn controlnet_residuals(
    base: &GeneratorWeights,
    cn: &ControlNetWeights,
    z_t: &Latent,
    t: usize,
    z_ref: &Latent,
    d_force: ForceVector,
    z_mask: &Latent,
) -> Result<Vec<ArrayD<f64>>> {
    let mut tape = Tape::new();
    let p_base = Params::frozen(&base.store);
    let p_cn = Params::frozen(&cn.store);
    let cond = cond_forward(&mut tape, &p_base, &base.config, t, Some(d_force));
    let cond_act = tape.silu(cond);
    let tokens = embed_forward(&mut tape, &p_base, &base.config, base.latent, z_t, z_ref, None);
    let nodes = control_residual_nodes(
        &mut tape,
        &p_cn,
        &base.config,
        base.config.patch,
        z_mask,
        tokens,
        cond_act,
    );
    Ok(nodes.into_iter().map(|n| tape.value(n).clone()).collect())
}
