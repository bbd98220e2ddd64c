//! Variance schedule shared by training and sampling.
//!
//! Index convention: `alpha_bar[t]` is the signal fraction after `t` noising
//! steps, so `alpha_bar[0] == 1` and valid diffusion steps are `1..=len`.

use crate::error::{DiffusionError, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Length `steps + 1`; entry 0 is the no-noise boundary.
    alpha_bar: Vec<f64>,
}

/// Coefficients of one reverse-step update written over the basis
/// (predicted clean latent, current latent, fresh noise):
/// `z_prev = coef_x0 * x0_hat + coef_xt * z_t + noise_std * xi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub noise_std: f64,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(DiffusionError::Invalid("schedule needs at least one step".into()));
        }
        if !(config.beta_start > 0.0 && config.beta_end < 1.0 && config.beta_start <= config.beta_end) {
            return Err(DiffusionError::Invalid(format!(
                "beta range ({}, {}) must satisfy 0 < start <= end < 1",
                config.beta_start, config.beta_end
            )));
        }
        let t = config.steps;
        let mut betas = Vec::with_capacity(t);
        for i in 0..t {
            let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
            betas.push(config.beta_start + (config.beta_end - config.beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(DiffusionError::Invalid(
                    "cumulative signal fraction must be strictly decreasing".into(),
                ));
            }
        }
        Ok(Self {
            config,
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn default_linear() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.config.steps
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Signal fraction after `t` steps; `t = 0` allowed and equals 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(DiffusionError::StepOutOfRange { t, max: self.len() });
        }
        Ok(())
    }

    /// Forward process: `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, z0: &Array3<f64>, t: usize, eps: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_step(t)?;
        if z0.dim() != eps.dim() {
            let (a, b, c) = eps.dim();
            return Err(DiffusionError::ShapeMismatch {
                context: "add_noise",
                expected: z0.shape().to_vec(),
                actual: vec![a, b, c],
            });
        }
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0 * s + eps * n)
    }

    /// Ancestral posterior q(z_{t-1} | z_t, x0) written over (x0, z_t, noise).
    pub fn ddpm_posterior_coefficients(&self, t: usize) -> Result<StepCoefficients> {
        self.check_step(t)?;
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let alpha = self.alpha(t);
        let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
        Ok(StepCoefficients {
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab_t),
            coef_xt: alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t),
            noise_std: var.sqrt(),
        })
    }

    /// Deterministic-to-stochastic interpolated reverse step from `t` down to
    /// `t_prev` (which may skip steps), written over (x0, z_t, noise).
    ///
    /// The update is derived from the standard form
    /// `z_prev = sqrt(abar_prev) x0 + sqrt(1 - abar_prev - sigma^2) eps + sigma xi`
    /// by substituting `eps = (z_t - sqrt(abar_t) x0) / sqrt(1 - abar_t)`.
    pub fn ddim_step_coefficients(&self, t: usize, t_prev: usize, eta: f64) -> Result<StepCoefficients> {
        self.check_step(t)?;
        if t_prev >= t {
            return Err(DiffusionError::Invalid(format!(
                "reverse step must decrease time, got {t} -> {t_prev}"
            )));
        }
        if eta < 0.0 {
            return Err(DiffusionError::Invalid(format!("eta must be >= 0, got {eta}")));
        }
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let sigma = eta
            * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
            * (1.0 - ab_t / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let root_one_minus_ab_t = (1.0 - ab_t).sqrt();
        Ok(StepCoefficients {
            coef_x0: ab_prev.sqrt() - dir * ab_t.sqrt() / root_one_minus_ab_t,
            coef_xt: dir / root_one_minus_ab_t,
            noise_std: sigma,
        })
    }

    /// Recover the clean-latent estimate from a noise prediction.
    pub fn predict_x0(&self, z_t: &Array3<f64>, t: usize, eps_hat: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        Ok((z_t - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt())
    }

    /// Descending sub-schedule of `steps` timesteps ending at 1, uniformly
    /// strided; `steps == len` enumerates every timestep.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let max = self.len();
        if steps == 0 || steps > max {
            return Err(DiffusionError::BadStepCount { steps, max });
        }
        let mut ts: Vec<usize> = (1..=steps).rev().map(|k| k * max / steps).collect();
        ts.dedup();
        debug_assert_eq!(ts.len(), steps);
        debug_assert_eq!(ts[0], max);
        debug_assert_eq!(*ts.last().unwrap(), max / steps);
        Ok(ts)
    }
}
