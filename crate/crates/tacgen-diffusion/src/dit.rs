//! Latent denoising transformer. The noisy latent is channel-concatenated
//! with its conditioning latents (reference frame, and in joint modes the
//! contact mask), cut into patches, and processed by pre-norm attention/MLP
//! blocks whose shift/scale/gate modulation comes from a zero-initialized
//! projection of the (timestep, force) embedding.

use crate::codec::Latent;
use crate::embed::{patchify, posemb_2d, sinusoidal_embedding, unpatchify};
use crate::error::{DiffusionError, Result};
use crate::net::Params;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};
use tacgen_core::rng::tagged_rng;
use tacgen_core::ForceVector;
use tacgen_nn::{NodeId, ParamStore, Tape};

/// Force components are divided by this before embedding, mapping the
/// working 0..10 N range onto roughly unit scale.
pub const FORCE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondMode {
    /// Stage 1: reference latent + force delta.
    ForceOnly,
    /// Joint baseline: reference latent + mask latent + force delta.
    Hybrid,
    /// Pipeline baseline: reference latent + mask latent, no force input.
    PositionOnly,
}

impl CondMode {
    pub fn uses_force(self) -> bool {
        !matches!(self, CondMode::PositionOnly)
    }

    pub fn uses_mask(self) -> bool {
        !matches!(self, CondMode::ForceOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            CondMode::ForceOnly => "force-only",
            CondMode::Hybrid => "hybrid",
            CondMode::PositionOnly => "position-only",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiTConfig {
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mode: CondMode,
}

impl DiTConfig {
    /// Documented default profile.
    pub fn default_force() -> Self {
        Self {
            patch: 2,
            depth: 6,
            dim: 192,
            heads: 6,
            mode: CondMode::ForceOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(DiffusionError::OddDepth { depth: self.depth });
        }
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(DiffusionError::Invalid(format!(
                "hidden dim {} must divide evenly into {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(DiffusionError::Invalid(format!(
                "hidden dim {} must be divisible by 4 for the position table",
                self.dim
            )));
        }
        if self.patch == 0 {
            return Err(DiffusionError::Invalid("patch size must be nonzero".into()));
        }
        Ok(())
    }

    /// Channels entering the patch embedding, as a multiple of the latent
    /// channel count: noisy latent + reference (+ mask in joint modes).
    pub fn input_mult(&self) -> usize {
        if self.mode.uses_mask() {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorWeights {
    pub store: ParamStore,
    pub config: DiTConfig,
    pub schedule: ScheduleConfig,
    /// Latent geometry (c, h, w) this model was built for.
    pub latent: (usize, usize, usize),
    pub codec_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    config: DiTConfig,
    schedule: ScheduleConfig,
    latent: (usize, usize, usize),
    codec_fingerprint: String,
}

pub fn init_generator(
    config: &DiTConfig,
    latent: (usize, usize, usize),
    schedule: ScheduleConfig,
    codec_fingerprint: &str,
    seed: u64,
) -> Result<GeneratorWeights> {
    config.validate()?;
    let (c, h, w) = latent;
    if h % config.patch != 0 || w % config.patch != 0 {
        return Err(DiffusionError::Invalid(format!(
            "patch {} must divide latent {}x{}",
            config.patch, h, w
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = tagged_rng(seed, "gen.init", 0);
    let d = config.dim;
    let p2c = config.patch * config.patch * c;
    let in_dim = config.input_mult() * p2c;

    let add_linear = |store: &mut ParamStore, rng: &mut _, name: &str, fan_in: usize, fan_out: usize| {
        let (wt, b) = tacgen_nn::init::linear_init(rng, fan_in, fan_out);
        store.add(&format!("{name}.w"), wt);
        store.add(&format!("{name}.b"), b);
    };
    let add_zero_linear = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
        store.add(&format!("{name}.w"), Array2::<f64>::zeros((fan_in, fan_out)));
        store.add(&format!("{name}.b"), Array2::<f64>::zeros((1, fan_out)));
    };

    add_linear(&mut store, &mut rng, "g.patch", in_dim, d);
    add_linear(&mut store, &mut rng, "g.t.l1", d, d);
    add_linear(&mut store, &mut rng, "g.t.l2", d, d);
    if config.mode.uses_force() {
        add_linear(&mut store, &mut rng, "g.f.l1", 3, d);
        add_linear(&mut store, &mut rng, "g.f.l2", d, d);
    }
    for i in 0..config.depth {
        add_zero_linear(&mut store, &format!("g.b{i}.mod"), d, 6 * d);
        add_linear(&mut store, &mut rng, &format!("g.b{i}.q"), d, d);
        add_linear(&mut store, &mut rng, &format!("g.b{i}.k"), d, d);
        add_linear(&mut store, &mut rng, &format!("g.b{i}.v"), d, d);
        add_linear(&mut store, &mut rng, &format!("g.b{i}.o"), d, d);
        add_linear(&mut store, &mut rng, &format!("g.b{i}.m1"), d, 4 * d);
        add_linear(&mut store, &mut rng, &format!("g.b{i}.m2"), 4 * d, d);
    }
    add_zero_linear(&mut store, "g.fin.mod", d, 2 * d);
    add_zero_linear(&mut store, "g.fin.out", d, p2c);

    Ok(GeneratorWeights {
        store,
        config: config.clone(),
        schedule,
        latent,
        codec_fingerprint: codec_fingerprint.to_string(),
    })
}

impl GeneratorWeights {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.schedule.clone()).expect("stored schedule is valid")
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut store = self.store.clone();
        store.meta.insert("kind".into(), "generator".into());
        let meta = GeneratorMeta {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            latent: self.latent,
            codec_fingerprint: self.codec_fingerprint.clone(),
        };
        store
            .meta
            .insert("generator".into(), serde_json::to_string(&meta).expect("meta serializes"));
        store.save(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        if store.meta.get("kind").map(String::as_str) != Some("generator") {
            return Err(DiffusionError::Invalid("not a generator weights file".into()));
        }
        let meta: GeneratorMeta = serde_json::from_str(
            store
                .meta
                .get("generator")
                .ok_or_else(|| DiffusionError::Invalid("generator file missing meta".into()))?,
        )
        .map_err(|e| DiffusionError::Invalid(format!("bad generator meta: {e}")))?;
        Ok(Self {
            store,
            config: meta.config,
            schedule: meta.schedule,
            latent: meta.latent,
            codec_fingerprint: meta.codec_fingerprint,
        })
    }
}

/// One pre-norm transformer block with conditioning-driven modulation.
/// `prefix` selects the weight family ("g.b3", "c.b1", ...).
pub fn block_forward(
    tape: &mut Tape,
    p: &Params,
    prefix: &str,
    dim: usize,
    heads: usize,
    x: NodeId,
    cond_act: NodeId,
) -> NodeId {
    let six = p.linear(tape, &format!("{prefix}.mod"), cond_act);
    let shift1 = tape.slice_cols(six, 0, dim);
    let scale1 = tape.slice_cols(six, dim, dim);
    let gate1 = tape.slice_cols(six, 2 * dim, dim);
    let shift2 = tape.slice_cols(six, 3 * dim, dim);
    let scale2 = tape.slice_cols(six, 4 * dim, dim);
    let gate2 = tape.slice_cols(six, 5 * dim, dim);

    let normed = tape.layer_norm(x);
    let moded = tape.modulate(normed, shift1, scale1);
    let q = p.linear(tape, &format!("{prefix}.q"), moded);
    let k = p.linear(tape, &format!("{prefix}.k"), moded);
    let v = p.linear(tape, &format!("{prefix}.v"), moded);
    let att = tape.attention(q, k, v, heads);
    let att = p.linear(tape, &format!("{prefix}.o"), att);
    let att = tape.mul_vec(att, gate1);
    let x = tape.add(x, att);

    let normed2 = tape.layer_norm(x);
    let moded2 = tape.modulate(normed2, shift2, scale2);
    let m = p.linear(tape, &format!("{prefix}.m1"), moded2);
    let m = tape.gelu(m);
    let m = p.linear(tape, &format!("{prefix}.m2"), m);
    let m = tape.mul_vec(m, gate2);
    tape.add(x, m)
}

/// Conditioning row (1, dim): timestep embedding plus, in force modes, the
/// embedded force delta.
pub fn cond_forward(
    tape: &mut Tape,
    p: &Params,
    config: &DiTConfig,
    t: usize,
    d_force: Option<ForceVector>,
) -> NodeId {
    let d = config.dim;
    let t_sin = sinusoidal_embedding(t as f64, d)
        .into_shape_with_order((1, d))
        .expect("row vector");
    let t_in = tape.constant(t_sin);
    let t_h = p.linear(tape, "g.t.l1", t_in);
    let t_h = tape.silu(t_h);
    let t_emb = p.linear(tape, "g.t.l2", t_h);
    if !config.mode.uses_force() {
        return t_emb;
    }
    let f = d_force.unwrap_or(ForceVector::ZERO);
    let f_row = Array2::from_shape_vec(
        (1, 3),
        vec![f.fx / FORCE_SCALE, f.fy / FORCE_SCALE, f.fz / FORCE_SCALE],
    )
    .expect("force row");
    let f_in = tape.constant(f_row);
    let f_h = p.linear(tape, "g.f.l1", f_in);
    let f_h = tape.silu(f_h);
    let f_emb = p.linear(tape, "g.f.l2", f_h);
    tape.add(t_emb, f_emb)
}

/// Patch tokens for the concatenated conditioning stack, with the fixed
/// position table added: this is the input to block 0.
pub fn embed_forward(
    tape: &mut Tape,
    p: &Params,
    config: &DiTConfig,
    latent: (usize, usize, usize),
    z_t: &Latent,
    z_ref: &Latent,
    z_mask: Option<&Latent>,
) -> NodeId {
    let (c, h, w) = latent;
    let pt = config.patch;
    let mut cols = Vec::new();
    for z in [Some(z_t), Some(z_ref), z_mask].into_iter().flatten() {
        debug_assert_eq!(z.dim(), (c, h, w));
        cols.push(patchify(z, pt));
    }
    let n_tok = (h / pt) * (w / pt);
    let per = pt * pt * c;
    let mut stacked = Array2::zeros((n_tok, per * cols.len()));
    for (k, m) in cols.iter().enumerate() {
        stacked
            .slice_mut(ndarray::s![.., k * per..(k + 1) * per])
            .assign(m);
    }
    let x_in = tape.constant(stacked);
    let tokens = p.linear(tape, "g.patch", x_in);
    let pos = tape.constant(posemb_2d(h / pt, w / pt, config.dim));
    tape.add(tokens, pos)
}

/// Block stack plus modulated output head, starting from embedded tokens.
/// `control` holds per-block additive residual nodes for the first
/// `depth / 2` blocks.
pub fn trunk_tokens(
    tape: &mut Tape,
    p: &Params,
    config: &DiTConfig,
    tokens: NodeId,
    cond_act: NodeId,
    control: Option<&[NodeId]>,
) -> NodeId {
    let mut x = tokens;
    for i in 0..config.depth {
        x = block_forward(tape, p, &format!("g.b{i}"), config.dim, config.heads, x, cond_act);
        if let Some(res) = control {
            if i < res.len() {
                x = tape.add(x, res[i]);
            }
        }
    }
    let two = p.linear(tape, "g.fin.mod", cond_act);
    let shift = tape.slice_cols(two, 0, config.dim);
    let scale = tape.slice_cols(two, config.dim, config.dim);
    let normed = tape.layer_norm(x);
    let moded = tape.modulate(normed, shift, scale);
    p.linear(tape, "g.fin.out", moded)
}

/// Full denoiser forward producing the predicted-noise token matrix.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_tokens(
    tape: &mut Tape,
    p: &Params,
    config: &DiTConfig,
    latent: (usize, usize, usize),
    z_t: &Latent,
    t: usize,
    z_ref: &Latent,
    d_force: Option<ForceVector>,
    z_mask: Option<&Latent>,
    control: Option<&[NodeId]>,
) -> NodeId {
    let cond = cond_forward(tape, p, config, t, d_force);
    let cond_act = tape.silu(cond);
    let tokens = embed_forward(tape, p, config, latent, z_t, z_ref, z_mask);
    trunk_tokens(tape, p, config, tokens, cond_act, control)
}

fn check_latent(context: &'static str, expected: (usize, usize, usize), z: &Latent) -> Result<()> {
    if z.dim() != expected {
        return Err(DiffusionError::ShapeMismatch {
            context,
            expected: vec![expected.0, expected.1, expected.2],
            actual: z.shape().to_vec(),
        });
    }
    Ok(())
}

impl GeneratorWeights {
    fn check_inputs(
        &self,
        z_t: &Latent,
        z_ref: &Latent,
        d_force: Option<ForceVector>,
        z_mask: Option<&Latent>,
    ) -> Result<()> {
        check_latent("noisy latent", self.latent, z_t)?;
        check_latent("reference latent", self.latent, z_ref)?;
        if self.config.mode.uses_force() && d_force.is_none() {
            return Err(DiffusionError::BadMode {
                mode: self.config.mode.name(),
                what: "force delta required",
            });
        }
        match (self.config.mode.uses_mask(), z_mask) {
            (true, Some(m)) => check_latent("mask latent", self.latent, m)?,
            (true, None) => {
                return Err(DiffusionError::BadMode {
                    mode: self.config.mode.name(),
                    what: "mask latent required",
                })
            }
            (false, Some(_)) => {
                return Err(DiffusionError::BadMode {
                    mode: self.config.mode.name(),
                    what: "mask latent not accepted",
                })
            }
            (false, None) => {}
        }
        Ok(())
    }

    /// Evaluation-mode noise prediction. `control` supplies optional
    /// per-block additive residuals (first depth/2 blocks).
    pub fn predict_noise(
        &self,
        z_t: &Latent,
        t: usize,
        z_ref: &Latent,
        d_force: Option<ForceVector>,
        z_mask: Option<&Latent>,
        control: Option<&[ArrayD<f64>]>,
    ) -> Result<Latent> {
        self.check_inputs(z_t, z_ref, d_force, z_mask)?;
        if t == 0 || t > self.schedule.steps {
            return Err(DiffusionError::StepOutOfRange {
                t,
                max: self.schedule.steps,
            });
        }
        if let Some(res) = control {
            if res.len() != self.config.depth / 2 {
                return Err(DiffusionError::ControlCountMismatch {
                    expected: self.config.depth / 2,
                    actual: res.len(),
                });
            }
        }
        let mut tape = Tape::new();
        let p = Params::frozen(&self.store);
        let control_nodes: Option<Vec<NodeId>> =
            control.map(|res| res.iter().map(|r| tape.constant(r.clone())).collect());
        let out = denoiser_tokens(
            &mut tape,
            &p,
            &self.config,
            self.latent,
            z_t,
            t,
            z_ref,
            d_force,
            z_mask,
            control_nodes.as_deref(),
        );
        let toks = tape
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("token matrix");
        let (c, h, w) = self.latent;
        Ok(unpatchify(&toks, self.config.patch, c, h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand_distr::{Distribution, StandardNormal};

    fn randn_latent(dims: (usize, usize, usize), seed: u64) -> Latent {
        let mut rng = tagged_rng(seed, "test.latent", 0);
        let mut z = Array3::zeros(dims);
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        z
    }

    fn tiny() -> GeneratorWeights {
        let config = DiTConfig {
            patch: 2,
            depth: 2,
            dim: 16,
            heads: 2,
            mode: CondMode::ForceOnly,
        };
        init_generator(
            &config,
            (4, 8, 8),
            ScheduleConfig { steps: 50, beta_start: 1e-4, beta_end: 2e-2 },
            "test-codec",
            11,
        )
        .unwrap()
    }

    #[test]
    fn predict_noise_shape_and_determinism() {
        let g = tiny();
        let z_t = randn_latent(g.latent, 1);
        let z_ref = randn_latent(g.latent, 2);
        let f = Some(ForceVector { fx: 0.2, fy: -0.1, fz: 4.0 });
        let a = g.predict_noise(&z_t, 10, &z_ref, f, None, None).unwrap();
        let b = g.predict_noise(&z_t, 10, &z_ref, f, None, None).unwrap();
        assert_eq!(a.dim(), g.latent);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_control_residuals_do_not_change_output() {
        let g = tiny();
        let z_t = randn_latent(g.latent, 3);
        let z_ref = randn_latent(g.latent, 4);
        let f = Some(ForceVector { fx: 0.0, fy: 0.0, fz: 2.5 });
        let plain = g.predict_noise(&z_t, 5, &z_ref, f, None, None).unwrap();
        let n_tok = (g.latent.1 / g.config.patch) * (g.latent.2 / g.config.patch);
        let zeros: Vec<ArrayD<f64>> =
            vec![Array2::<f64>::zeros((n_tok, g.config.dim)).into_dyn(); g.config.depth / 2];
        let controlled = g.predict_noise(&z_t, 5, &z_ref, f, None, Some(&zeros)).unwrap();
        let gap = plain
            .iter()
            .zip(controlled.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn zero_init_final_layer_predicts_zero_noise() {
        // The output projection starts at zero, so an untrained model must
        // emit exactly zero regardless of inputs.
        let g = tiny();
        let z_t = randn_latent(g.latent, 5);
        let z_ref = randn_latent(g.latent, 6);
        let out = g
            .predict_noise(&z_t, 1, &z_ref, Some(ForceVector::ZERO), None, None)
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_contracts_are_enforced() {
        let g = tiny();
        let z = randn_latent(g.latent, 7);
        // Missing force.
        assert!(g.predict_noise(&z, 1, &z, None, None, None).is_err());
        // Unexpected mask.
        assert!(g
            .predict_noise(&z, 1, &z, Some(ForceVector::ZERO), Some(&z.clone()), None)
            .is_err());
        // Wrong residual count.
        let bad: Vec<ArrayD<f64>> = vec![Array2::<f64>::zeros((16, 16)).into_dyn(); 3];
        assert!(g
            .predict_noise(&z, 1, &z, Some(ForceVector::ZERO), None, Some(&bad))
            .is_err());
        // Step out of range.
        assert!(g.predict_noise(&z, 0, &z, Some(ForceVector::ZERO), None, None).is_err());
        assert!(g.predict_noise(&z, 51, &z, Some(ForceVector::ZERO), None, None).is_err());
    }

    #[test]
    fn force_conditioning_changes_output_after_perturbation() {
        let mut g = tiny();
        // Nudge the final projection so outputs are nonzero, and the final
        // modulation so the conditioning vector actually reaches them.
        for name in ["g.fin.out.w", "g.fin.mod.w"] {
            let id = g.store.id_of(name).unwrap();
            g.store.get_mut(id).mapv_inplace(|_| 0.01);
        }
        let z_t = randn_latent(g.latent, 8);
        let z_ref = randn_latent(g.latent, 9);
        let a = g
            .predict_noise(&z_t, 3, &z_ref, Some(ForceVector { fx: 0.0, fy: 0.0, fz: 1.0 }), None, None)
            .unwrap();
        let b = g
            .predict_noise(&z_t, 3, &z_ref, Some(ForceVector { fx: 0.0, fy: 0.0, fz: 9.0 }), None, None)
            .unwrap();
        let gap = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        assert!(gap > 0.0);
    }

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let g = tiny();
        let dir = std::env::temp_dir().join(format!("tacgen-gen-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gen.tacw");
        g.save(&path).unwrap();
        let loaded = GeneratorWeights::load(&path).unwrap();
        assert_eq!(g.config, loaded.config);
        assert_eq!(g.schedule, loaded.schedule);
        assert_eq!(g.latent, loaded.latent);
        assert_eq!(g.codec_fingerprint, loaded.codec_fingerprint);
        assert_eq!(g.fingerprint(), loaded.fingerprint());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn position_only_mode_has_no_force_parameters() {
        let config = DiTConfig {
            patch: 2,
            depth: 2,
            dim: 16,
            heads: 2,
            mode: CondMode::PositionOnly,
        };
        let g = init_generator(
            &config,
            (4, 8, 8),
            ScheduleConfig { steps: 50, beta_start: 1e-4, beta_end: 2e-2 },
            "test-codec",
            3,
        )
        .unwrap();
        assert!(g.store.id_of("g.f.l1.w").is_none());
        let z_t = randn_latent(g.latent, 10);
        let z_ref = randn_latent(g.latent, 11);
        let z_mask = randn_latent(g.latent, 12);
        let out = g.predict_noise(&z_t, 2, &z_ref, None, Some(&z_mask), None).unwrap();
        assert_eq!(out.dim(), g.latent);
    }

    #[test]
    fn odd_depth_is_rejected() {
        let config = DiTConfig {
            patch: 2,
            depth: 3,
            dim: 16,
            heads: 2,
            mode: CondMode::ForceOnly,
        };
        assert!(init_generator(&config, (4, 8, 8), ScheduleConfig::default(), "x", 0).is_err());
    }
}
