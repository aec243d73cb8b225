//! Noise schedules, timestep respacing, and the closed-form forward and
//! reverse diffusion steps.
//!
//! Timesteps are 1-based: step `t` in `1..=T` adds noise with variance
//! `beta_t`, and index 0 denotes the clean image (`alpha_bar_0 = 1`).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, Image};

/// Which constant is used for the reverse-step variance `sigma_t^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// `beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    #[default]
    Posterior,
    /// `beta_t`.
    Beta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

/// Serializable description of a linear schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance: VarianceKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            variance: VarianceKind::Posterior,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear `beta` schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Param(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Param(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Param("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        })
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Keeps `steps` timesteps spread uniformly over `[1, T]`, both ends
    /// included.
    pub fn respace(&self, steps: usize) -> Result<RespacedSchedule> {
        let t = self.num_timesteps();
        if steps < 2 || steps > t {
            return Err(Error::Param(format!(
                "respacing to {steps} steps needs 2 <= steps <= {t}"
            )));
        }
        let stride = (t - 1) as f64 / (steps - 1) as f64;
        let kept: Vec<usize> = (0..steps)
            .map(|i| 1 + (i as f64 * stride).round() as usize)
            .collect();
        RespacedSchedule::from_kept(self.clone(), kept)
    }

    /// The trivial respacing that keeps every step.
    pub fn full(&self) -> RespacedSchedule {
        RespacedSchedule::from_kept(self.clone(), (1..=self.num_timesteps()).collect())
            .expect("identity respacing is valid")
    }
}

/// A subsequence of a base schedule with effective per-step betas chosen so
/// that `alpha_bar` at each kept step equals the base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RespacedSchedule {
    base: NoiseSchedule,
    kept: Vec<usize>,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl RespacedSchedule {
    pub fn from_kept(base: NoiseSchedule, kept: Vec<usize>) -> Result<Self> {
        if kept.len() < 2 {
            return Err(Error::Param("respaced schedule needs at least 2 steps".into()));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param("kept timesteps must be strictly increasing".into()));
        }
        if kept[0] < 1 || *kept.last().unwrap() > base.num_timesteps() {
            return Err(Error::Param("kept timesteps outside [1, T]".into()));
        }
        let mut betas = Vec::with_capacity(kept.len());
        let mut prev_t = 0;
        for &t in &kept {
            let beta = if t == prev_t + 1 {
                base.betas[t - 1]
            } else {
                1.0 - base.alpha_bar(t) / base.alpha_bar(prev_t)
            };
            betas.push(beta);
            prev_t = t;
        }
        let alpha_bars = kept.iter().map(|&t| base.alpha_bar(t)).collect();
        Ok(Self {
            base,
            kept,
            betas,
            alpha_bars,
        })
    }

    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    /// Number of sampling steps `S`.
    pub fn num_steps(&self) -> usize {
        self.kept.len()
    }

    pub fn kept_timesteps(&self) -> &[usize] {
        &self.kept
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Original timestep of sampling step `s` in `1..=S` (0 for `s == 0`).
    pub fn timestep(&self, s: usize) -> usize {
        if s == 0 {
            0
        } else {
            self.kept[s - 1]
        }
    }

    /// `alpha_bar` at sampling step `s` in `0..=S`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn variance(&self, s: usize, kind: VarianceKind) -> f64 {
        let beta = self.beta(s);
        match kind {
            VarianceKind::Beta => beta,
            VarianceKind::Posterior => beta * (1.0 - self.alpha_bar(s - 1)) / (1.0 - self.alpha_bar(s)),
        }
    }

    /// Sampling step for an original timestep: the last kept timestep that
    /// does not exceed `t`. Returns 0 for `t` below the first kept step.
    pub fn step_for_timestep(&self, t: usize) -> usize {
        self.kept.partition_point(|&k| k <= t)
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.num_steps() {
            return Err(Error::Param(format!(
                "step {s} outside sampled range 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

/// Standard normal noise shaped like `like`, in the diffusion domain.
pub fn gaussian_like<R: Rng + ?Sized>(like: &Image, rng: &mut R) -> Image {
    let data = (0..like.len()).map(|_| rng.sample(StandardNormal)).collect();
    let (c, h, w) = like.shape();
    Image::new(c, h, w, Domain::Diffusion11, data).expect("same shape")
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` with `ab = alpha_bar` at original
/// timestep `t`; `t == 0` returns `x0` unchanged.
pub fn q_sample(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    if t > sched.num_timesteps() {
        return Err(Error::Param(format!(
            "timestep {t} beyond T={}",
            sched.num_timesteps()
        )));
    }
    mix(x0, sched.alpha_bar(t), eps)
}

/// [`q_sample`] indexed by a respaced step.
pub fn q_sample_step(x0: &Image, s: usize, eps: &Image, sched: &RespacedSchedule) -> Result<Image> {
    if s > sched.num_steps() {
        return Err(Error::Param(format!("step {s} beyond S={}", sched.num_steps())));
    }
    mix(x0, sched.alpha_bar(s), eps)
}

fn mix(x0: &Image, alpha_bar: f64, eps: &Image) -> Result<Image> {
    x0.ensure_domain(Domain::Diffusion11)?;
    x0.ensure_same_shape(eps)?;
    if alpha_bar == 1.0 {
        return Ok(x0.clone());
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Inverts the forward marginal: `(x_t - sqrt(1 - ab) * eps) / sqrt(ab)`.
pub fn predict_x0(x_t: &Image, s: usize, eps_pred: &Image, sched: &RespacedSchedule) -> Result<Image> {
    sched.check_step(s)?;
    x_t.ensure_same_shape(eps_pred)?;
    let ab = sched.alpha_bar(s);
    let (inv_a, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_pred, |x, e| (x - b * e) * inv_a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub variance: VarianceKind,
    /// Take the eta = 0 implicit step instead of the stochastic one.
    pub deterministic: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            variance: VarianceKind::Posterior,
            deterministic: false,
        }
    }
}

/// One reverse step from sampling step `s` to `s - 1`.
///
/// Stochastic: `mu + sigma_s * noise` with
/// `mu = (x_t - beta_s / sqrt(1 - ab_s) * eps) / sqrt(alpha_s)`.
/// Deterministic: `sqrt(ab_{s-1}) * x0_hat + sqrt(1 - ab_{s-1}) * eps`.
/// At `s == 1` no noise is injected.
pub fn p_step(
    x_t: &Image,
    s: usize,
    eps_pred: &Image,
    sched: &RespacedSchedule,
    noise: Option<&Image>,
    opts: StepOptions,
) -> Result<Image> {
    sched.check_step(s)?;
    x_t.ensure_domain(Domain::Diffusion11)?;
    x_t.ensure_same_shape(eps_pred)?;
    if opts.deterministic {
        let x0 = predict_x0(x_t, s, eps_pred, sched)?;
        let ab_prev = sched.alpha_bar(s - 1);
        if s == 1 {
            return Ok(x0);
        }
        let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        return x0.zip_map(eps_pred, |x, e| a * x + b * e);
    }
    let beta = sched.beta(s);
    let alpha = 1.0 - beta;
    let coef = beta / (1.0 - sched.alpha_bar(s)).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mean = x_t.zip_map(eps_pred, |x, e| (x - coef * e) * inv_sqrt_alpha)?;
    if s == 1 {
        return Ok(mean);
    }
    match noise {
        None => Ok(mean),
        Some(z) => {
            let sigma = sched.variance(s, opts.variance).sqrt();
            mean.zip_map(z, |m, z| m + sigma * z)
        }
    }
}
