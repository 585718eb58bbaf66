//! Turning Gaussian noise into a source-conditioned latent.
//!
//! All samplers consume clean-latent predictions. Ancestral sampling draws
//! from the Gaussian posterior between grid points, DDIM takes skip steps
//! along the implied noise direction, and DPM-Solver++(2M) integrates the
//! probability-flow ODE in log-SNR time with a second-order multistep rule.

mod generate;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Cond, Denoise};
use crate::error::{Error, Result};
use crate::rng::randn;
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

pub use generate::{generate, generate_many, trace, trace_many, Components, TracePoint, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    #[serde(rename = "ancestral")]
    Ancestral,
    #[serde(rename = "ddim")]
    Ddim,
    #[serde(rename = "dpm++")]
    DpmSolverPp,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Ddim => "ddim",
            SamplerKind::DpmSolverPp => "dpm++",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "ddim" => Ok(SamplerKind::Ddim),
            "dpm++" | "dpm_solver_pp" | "dpm-solver++" => Ok(SamplerKind::DpmSolverPp),
            other => Err(Error::Invalid(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// DDIM stochasticity; ignored by the other samplers.
    pub eta: f64,
    /// Classifier-free guidance scale. 1.0 is the plain conditional model.
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::DpmSolverPp, steps: 25, eta: 0.0, guidance: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn ancestral(steps: usize) -> Self {
        Self { kind: SamplerKind::Ancestral, steps, ..Default::default() }
    }

    pub fn ddim(steps: usize, eta: f64) -> Self {
        Self { kind: SamplerKind::Ddim, steps, eta, ..Default::default() }
    }

    pub fn dpm(steps: usize) -> Self {
        Self { kind: SamplerKind::DpmSolverPp, steps, ..Default::default() }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_guidance(self, guidance: f64) -> Self {
        Self { guidance, ..self }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let t = schedule.steps();
        let min = if self.kind == SamplerKind::DpmSolverPp { 2 } else { 1 };
        if self.steps < min || self.steps > t {
            return Err(Error::Invalid(format!("{} needs between {min} and {t} steps, got {}", self.kind, self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Invalid(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Invalid(format!("guidance scale {} must be finite and non-negative", self.guidance)));
        }
        Ok(())
    }
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
pub struct Guided<'a> {
    pub model: &'a dyn Denoise,
    pub scale: f64,
}

impl Denoise for Guided<'_> {
    fn predict(&self, z_t: &Mat, cond: Cond<'_>, t: usize) -> Result<Mat> {
        if self.scale == 1.0 {
            return self.model.predict(z_t, cond, t);
        }
        let uncond = self.model.predict(z_t, cond.unconditional(), t)?;
        if self.scale == 0.0 {
            return Ok(uncond);
        }
        let c = self.model.predict(z_t, cond, t)?;
        Ok(&uncond + &((&c - &uncond) * self.scale))
    }

    fn latent_shape(&self) -> (usize, usize) {
        self.model.latent_shape()
    }

    fn keyword_ratio(&self) -> Option<f64> {
        self.model.keyword_ratio()
    }
}

/// `steps` strictly decreasing grid points from `T` down to at least 1, evenly spaced in `t`.
pub fn uniform_times(total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|i| ((steps - i) * total).div_ceil(steps)).collect()
}

/// `steps` grid points evenly spaced in log-SNR between `T` and 1, snapped to
/// integer steps. A point that snaps onto (or past) its predecessor moves to
/// the next free step, keeping room for the points still to come.
pub fn log_snr_times(schedule: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let total = schedule.steps();
    let lo = schedule.log_snr(total);
    let hi = schedule.log_snr(1);
    let mut out: Vec<usize> = Vec::with_capacity(steps);
    for i in 0..steps {
        let target = if steps == 1 { lo } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 };
        let snapped = (1..=total)
            .min_by(|&a, &b| {
                let da = (schedule.log_snr(a) - target).abs();
                let db = (schedule.log_snr(b) - target).abs();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap_or(1);
        let ceiling = out.last().map_or(total, |&p| p - 1);
        out.push(snapped.min(ceiling).max(steps - i));
    }
    out
}

/// Observer called once per model evaluation with `(t, z0_hat)`.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &Mat);

fn check_finite(z: &Mat, t: usize) -> Result<()> {
    if z.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite sampler state at step {t}")))
    }
}

fn eval(model: &dyn Denoise, z: &Mat, cond: Cond<'_>, t: usize, obs: &mut Option<Observer<'_>>) -> Result<Mat> {
    let x0 = model.predict(z, cond, t)?;
    check_finite(&x0, t)?;
    if let Some(f) = obs.as_mut() {
        f(t, &x0);
    }
    Ok(x0)
}

/// Runs the sampler from the given `z_T`. `rng` feeds only the per-step noise.
pub fn sample_from<R: Rng>(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    z_t: Mat,
    rng: &mut R,
    mut obs: Option<Observer<'_>>,
) -> Result<Mat> {
    config.validate(schedule)?;
    let want = model.latent_shape();
    if z_t.dim() != want {
        return Err(Error::shape(want, z_t.dim()));
    }
    let guided = Guided { model, scale: config.guidance };
    let m: &dyn Denoise = &guided;
    match config.kind {
        SamplerKind::Ancestral => ancestral(m, cond, schedule, config.steps, z_t, rng, &mut obs),
        SamplerKind::Ddim => ddim(m, cond, schedule, config.steps, config.eta, z_t, rng, &mut obs),
        SamplerKind::DpmSolverPp => dpm_solver_pp(m, cond, schedule, config.steps, z_t, &mut obs),
    }
}

/// Draws `z_T ~ N(0, I)` from `rng` and samples.
pub fn sample<R: Rng>(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Mat> {
    let (l, d) = model.latent_shape();
    let z_t = randn(rng, l, d);
    sample_from(model, cond, schedule, config, z_t, rng, None)
}

pub fn sample_ancestral<R: Rng>(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Mat> {
    sample(model, cond, schedule, &SamplerConfig::ancestral(steps), rng)
}

pub fn sample_ddim<R: Rng>(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    rng: &mut R,
) -> Result<Mat> {
    sample(model, cond, schedule, &SamplerConfig::ddim(steps, eta), rng)
}

pub fn sample_dpm_solver_pp<R: Rng>(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Mat> {
    sample(model, cond, schedule, &SamplerConfig::dpm(steps), rng)
}

fn ancestral<R: Rng>(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    steps: usize,
    mut z: Mat,
    rng: &mut R,
    obs: &mut Option<Observer<'_>>,
) -> Result<Mat> {
    let times = uniform_times(schedule.steps(), steps);
    let (l, d) = z.dim();
    let mut x0 = z.clone();
    for (i, &t) in times.iter().enumerate() {
        x0 = eval(model, &z, cond, t, obs)?;
        let Some(&s) = times.get(i + 1) else { break };
        let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
        let beta = 1.0 - ab_t / ab_s;
        let c0 = ab_s.sqrt() * beta / (1.0 - ab_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let std = ((1.0 - ab_s) / (1.0 - ab_t) * beta).sqrt();
        let noise = randn(rng, l, d);
        z = &x0 * c0 + &z * ct + noise * std;
        check_finite(&z, s)?;
    }
    Ok(x0)
}

#[allow(clippy::too_many_arguments)]
fn ddim<R: Rng>(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    mut z: Mat,
    rng: &mut R,
    obs: &mut Option<Observer<'_>>,
) -> Result<Mat> {
    let times = uniform_times(schedule.steps(), steps);
    let (l, d) = z.dim();
    let mut x0 = z.clone();
    for (i, &t) in times.iter().enumerate() {
        x0 = eval(model, &z, cond, t, obs)?;
        let Some(&s) = times.get(i + 1) else { break };
        let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
        let eps = (&z - &(&x0 * ab_t.sqrt())) / (1.0 - ab_t).sqrt();
        let sigma = eta * ((1.0 - ab_s) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_s).sqrt();
        let dir = (1.0 - ab_s - sigma * sigma).max(0.0).sqrt();
        z = &x0 * ab_s.sqrt() + eps * dir;
        if sigma > 0.0 {
            z = z + randn(rng, l, d) * sigma;
        }
        check_finite(&z, s)?;
    }
    Ok(x0)
}

fn dpm_solver_pp(
    model: &dyn Denoise,
    cond: Cond<'_>,
    schedule: &NoiseSchedule,
    steps: usize,
    mut z: Mat,
    obs: &mut Option<Observer<'_>>,
) -> Result<Mat> {
    let times = log_snr_times(schedule, steps);
    let mut prev: Option<(Mat, f64)> = None;
    let mut x0 = z.clone();
    for (i, &t) in times.iter().enumerate() {
        x0 = eval(model, &z, cond, t, obs)?;
        let Some(&s) = times.get(i + 1) else { break };
        let (lt, ls) = (schedule.log_snr(t), schedule.log_snr(s));
        let h = ls - lt;
        let d = match &prev {
            None => x0.clone(),
            Some((x_prev, h_prev)) => {
                let r = h_prev / h;
                &x0 * (1.0 + 0.5 / r) - x_prev * (0.5 / r)
            }
        };
        let ratio = schedule.noise(s) / schedule.noise(t);
        z = &z * ratio - d * (schedule.signal(s) * (-h).exp_m1());
        check_finite(&z, s)?;
        prev = Some((x0.clone(), h));
    }
    Ok(x0)
}
