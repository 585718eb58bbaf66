//! Discrete noise schedules and the closed-form forward (noising) process.
//!
//! Tables are indexed so that `alpha_bar(0) == 1` denotes clean data and
//! `alpha_bar(t) = prod_{i<=t} (1 - beta_i)` for `t` in `1..=T`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::randn;
use crate::tensor::Mat;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_MAX_BETA: f64 = 0.999;

/// Everything needed to rebuild a schedule. Checkpoints store this, never the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Cosine { steps: usize, offset: f64, max_beta: f64 },
    Linear { steps: usize, beta_start: f64, beta_end: f64 },
}

impl ScheduleSpec {
    pub fn cosine_default(steps: usize) -> Self {
        ScheduleSpec::Cosine { steps, offset: DEFAULT_COSINE_OFFSET, max_beta: DEFAULT_MAX_BETA }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Cosine { steps, offset, max_beta } => NoiseSchedule::cosine(steps, offset, max_beta),
            ScheduleSpec::Linear { steps, beta_start, beta_end } => NoiseSchedule::linear(steps, beta_start, beta_end),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// A noised latent together with the step and noise that produced it.
#[derive(Clone, Debug)]
pub struct ForwardSample {
    pub z_t: Mat,
    pub t: usize,
    pub eps: Mat,
}

impl NoiseSchedule {
    /// Squared-cosine `alpha_bar` profile with per-step betas clipped at `max_beta`.
    pub fn cosine(steps: usize, offset: f64, max_beta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(max_beta > 0.0 && max_beta <= 1.0) {
            return Err(Error::Invalid(format!("max_beta {max_beta} outside (0, 1]")));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(Error::Invalid(format!("cosine offset {offset} outside (0, 1)")));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + offset) / (1.0 + offset) * FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let betas = (1..=steps)
            .map(|t| {
                let prev = f(t - 1) / f0;
                let cur = f(t) / f0;
                (1.0 - cur / prev).clamp(f64::MIN_POSITIVE, max_beta)
            })
            .collect();
        Self::from_betas(ScheduleSpec::Cosine { steps, offset, max_beta }, betas)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(ScheduleSpec::Linear { steps, beta_start, beta_end }, betas)
    }

    fn from_betas(spec: ScheduleSpec, betas: Vec<f64>) -> Result<Self> {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self { spec, betas, alpha_bars, sigmas })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Per-step transition standard deviation `sqrt(beta_t)`, `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Signal scale `sqrt(alpha_bar_t)`.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    /// Noise scale `sqrt(1 - alpha_bar_t)`.
    pub fn noise(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    /// Half log signal-to-noise ratio, `ln(signal / noise)`. Infinite at `t = 0`.
    pub fn log_snr(&self, t: usize) -> f64 {
        0.5 * (self.alpha_bars[t].ln() - (-self.alpha_bars[t]).ln_1p())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepRange { t, min: 1, max: self.steps() });
        }
        Ok(())
    }

    /// Closed-form `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_noise(&self, z0: &Mat, t: usize, eps: &Mat) -> Result<Mat> {
        self.check_step(t)?;
        if z0.dim() != eps.dim() {
            return Err(Error::shape(z0.dim(), eps.dim()));
        }
        let (a, b) = (self.signal(t), self.noise(t));
        let mut out = z0 * a;
        out.scaled_add(b, eps);
        Ok(out)
    }

    pub fn sample_forward<R: Rng>(&self, z0: &Mat, t: usize, rng: &mut R) -> Result<ForwardSample> {
        let eps = randn(rng, z0.nrows(), z0.ncols());
        let z_t = self.forward_noise(z0, t, &eps)?;
        Ok(ForwardSample { z_t, t, eps })
    }
}
