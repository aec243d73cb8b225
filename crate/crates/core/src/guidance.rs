//! Low-frequency guided pseudo-target generation and the baseline
//! samplers that share its machinery.
//!
//! Every sampler here is one loop over respaced steps `k..1`:
//! steps above `l` are *constrained* (the low frequencies of the denoised
//! state are replaced by those of a freshly noised copy of the guide), and
//! steps at or below `l` form the *tail*, either plain reverse diffusion or
//! a single projection to the clean estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::resample::{block_average, resize_bilinear, upsample_nearest};
use crate::schedule::{
    gaussian_like, p_step, predict_x0, q_sample, q_sample_step, NoiseSchedule, RespacedSchedule, StepOptions,
    VarianceKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DownMethod {
    #[default]
    BlockAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpMethod {
    /// Makes the filter an exact linear projection.
    #[default]
    Nearest,
    Bilinear,
}

/// `phi_N`: downsample by `factor`, then upsample back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowPassFilter {
    pub factor: usize,
    #[serde(default)]
    pub down: DownMethod,
    #[serde(default)]
    pub up: UpMethod,
}

impl LowPassFilter {
    pub fn new(factor: usize) -> Result<Self> {
        Self::with_up(factor, UpMethod::Nearest)
    }

    pub fn with_up(factor: usize, up: UpMethod) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Param("low-pass factor must be >= 1".into()));
        }
        Ok(Self {
            factor,
            down: DownMethod::BlockAverage,
            up,
        })
    }

    pub fn is_projection(&self) -> bool {
        self.up == UpMethod::Nearest
    }

    pub fn check_dims(&self, img: &Image) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::Param("low-pass factor must be >= 1".into()));
        }
        if img.height() % self.factor != 0 || img.width() % self.factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible by low-pass factor {}",
                img.height(),
                img.width(),
                self.factor
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check_dims(x)?;
        if self.factor == 1 {
            return Ok(x.clone());
        }
        let low = match self.down {
            DownMethod::BlockAverage => block_average(x, self.factor)?,
        };
        match self.up {
            UpMethod::Nearest => upsample_nearest(&low, self.factor),
            UpMethod::Bilinear => resize_bilinear(&low, x.height(), x.width()),
        }
    }
}

pub fn lowpass(x: &Image, f: &LowPassFilter) -> Result<Image> {
    f.apply(x)
}

/// `x - phi(x) + phi(y)`: keeps the high frequencies of `x` and takes the
/// low frequencies from `y`.
pub fn constrained_step(x_prev: &Image, y_prev: &Image, f: &LowPassFilter) -> Result<Image> {
    x_prev.ensure_same_shape(y_prev)?;
    let lx = f.apply(x_prev)?;
    let ly = f.apply(y_prev)?;
    let mut out = x_prev.clone();
    for ((o, a), b) in out.data_mut().iter_mut().zip(lx.data()).zip(ly.data()) {
        // equal low frequencies leave x untouched (avoids a rounding round-trip)
        if a != b {
            *o = (*o - a) + b;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetGenConfig {
    /// Start, in original timesteps.
    pub k: usize,
    /// End of the constrained window, in original timesteps.
    pub l: usize,
    pub filter: LowPassFilter,
    pub respaced_steps: usize,
    /// Use implicit (eta = 0) steps in the unconstrained tail.
    #[serde(default)]
    pub deterministic_tail: bool,
    #[serde(default)]
    pub variance: VarianceKind,
}

impl TargetGenConfig {
    /// N = 16, K = 600, L = 360 over 250 respaced steps.
    pub fn paper_default() -> Self {
        Self {
            k: 600,
            l: 360,
            filter: LowPassFilter::new(16).expect("valid factor"),
            respaced_steps: 250,
            deterministic_tail: false,
            variance: VarianceKind::Posterior,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-default" => Ok(Self::paper_default()),
            other => Err(Error::Config(format!("unknown target preset `{other}`"))),
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.l >= self.k {
            return Err(Error::Config(format!("need L < K, got K={} L={}", self.k, self.l)));
        }
        if self.k > timesteps {
            return Err(Error::Config(format!("K={} exceeds T={timesteps}", self.k)));
        }
        if self.respaced_steps < 2 || self.respaced_steps > timesteps {
            return Err(Error::Config(format!(
                "respaced_steps {} outside [2, {timesteps}]",
                self.respaced_steps
            )));
        }
        if self.filter.factor == 0 {
            return Err(Error::Config("low-pass factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// What happens once the constrained window ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    Unconditional,
    /// Jump straight to the clean estimate from the current state.
    ProjectX0,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Constrained K -> L, unconditional L -> 0.
    Ours,
    /// Unconditional from K.
    Difface,
    /// Constrained at every step.
    Ilvr,
    /// Constrained K -> L, then one-step projection.
    Dr2,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Self::Ours),
            "difface" => Ok(Self::Difface),
            "ilvr" => Ok(Self::Ilvr),
            "dr2" => Ok(Self::Dr2),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// A fully resolved sampling run, in respaced step units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub k_step: usize,
    pub l_step: usize,
    pub filter: LowPassFilter,
    pub tail: Tail,
    pub variance: VarianceKind,
    pub deterministic_tail: bool,
}

/// How original K/L were mapped onto the respaced grid: each maps to the
/// number of kept timesteps at or below it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMapping {
    pub k: usize,
    pub l: usize,
    pub k_step: usize,
    pub l_step: usize,
    /// Original timestep of each mapped step (0 = clean).
    pub k_timestep: usize,
    pub l_timestep: usize,
    pub constrained_steps: usize,
    pub tail_steps: usize,
}

impl SamplerPlan {
    pub fn resolve(kind: SamplerKind, cfg: &TargetGenConfig, resp: &RespacedSchedule) -> Result<Self> {
        let t = resp.base().num_timesteps();
        if cfg.k > t {
            return Err(Error::Config(format!("K={} exceeds T={t}", cfg.k)));
        }
        let (l, tail) = match kind {
            SamplerKind::Ours => (cfg.l, Tail::Unconditional),
            SamplerKind::Difface => (cfg.k, Tail::Unconditional),
            SamplerKind::Ilvr => (0, Tail::Unconditional),
            SamplerKind::Dr2 => (cfg.l, Tail::ProjectX0),
        };
        if l > cfg.k {
            return Err(Error::Config(format!("need L <= K, got K={} L={l}", cfg.k)));
        }
        Ok(Self {
            k_step: resp.step_for_timestep(cfg.k),
            l_step: resp.step_for_timestep(l),
            filter: cfg.filter,
            tail,
            variance: cfg.variance,
            deterministic_tail: cfg.deterministic_tail,
        })
    }

    pub fn mapping(&self, k: usize, l: usize, resp: &RespacedSchedule) -> StepMapping {
        let ts = |s: usize| if s == 0 { 0 } else { resp.timestep(s) };
        StepMapping {
            k,
            l,
            k_step: self.k_step,
            l_step: self.l_step,
            k_timestep: ts(self.k_step),
            l_timestep: ts(self.l_step),
            constrained_steps: self.k_step - self.l_step,
            tail_steps: match self.tail {
                Tail::Unconditional => self.l_step,
                Tail::ProjectX0 => usize::from(self.l_step > 0),
            },
        }
    }
}

/// Per-step view passed to a sampling observer: respaced step just
/// reached (`s - 1`), current states, and the guide states used for the
/// constraint (`None` in the tail).
pub struct StepView<'a> {
    pub step: usize,
    pub x: &'a [Image],
    pub y: Option<&'a [Image]>,
}

/// Runs `plan` on a batch of guides (pixel domain). Image `i` draws all its
/// randomness from `rngs[i]`, so results do not depend on batch
/// composition. Per image, draws are: initial noise, then per step the
/// reverse-step noise (if any) followed by the guide noise (if
/// constrained and not at the last step).
pub fn run_sampler<D, R>(
    y0: &[Image],
    plan: &SamplerPlan,
    denoiser: &D,
    resp: &RespacedSchedule,
    rngs: &mut [R],
    mut observe: Option<&mut dyn FnMut(StepView<'_>)>,
) -> Result<Vec<Image>>
where
    D: Denoiser + ?Sized,
    R: Rng,
{
    if y0.len() != rngs.len() {
        return Err(Error::Param(format!("{} guides but {} RNG streams", y0.len(), rngs.len())));
    }
    if plan.l_step > plan.k_step || plan.k_step > resp.num_steps() {
        return Err(Error::Config(format!(
            "invalid step window {}..{} for {} steps",
            plan.k_step,
            plan.l_step,
            resp.num_steps()
        )));
    }
    for y in y0 {
        y.ensure_domain(Domain::Pixel01)?;
        plan.filter.check_dims(y)?;
    }
    if plan.k_step == 0 {
        return Ok(y0.to_vec());
    }
    let guides: Vec<Image> = y0.iter().map(Image::to_diffusion).collect::<Result<_>>()?;
    let mut x: Vec<Image> = guides
        .iter()
        .zip(rngs.iter_mut())
        .map(|(g, rng)| {
            let eps = gaussian_like(g, rng);
            q_sample_step(g, plan.k_step, &eps, resp)
        })
        .collect::<Result<_>>()?;

    let stochastic = StepOptions {
        variance: plan.variance,
        deterministic: false,
    };
    let tail_opts = StepOptions {
        variance: plan.variance,
        deterministic: plan.deterministic_tail,
    };
    for s in (1..=plan.k_step).rev() {
        let constrained = s > plan.l_step;
        if !constrained && plan.tail == Tail::ProjectX0 {
            let ts = vec![resp.timestep(s); x.len()];
            let eps = denoiser.predict_eps(&x, &ts)?;
            x = x
                .iter()
                .zip(&eps)
                .map(|(xi, e)| predict_x0(xi, s, e, resp))
                .collect::<Result<_>>()?;
            if let Some(f) = observe.as_mut() {
                f(StepView { step: 0, x: &x, y: None });
            }
            break;
        }
        let opts = if constrained { stochastic } else { tail_opts };
        let ts = vec![resp.timestep(s); x.len()];
        let eps = denoiser.predict_eps(&x, &ts)?;
        let mut next = Vec::with_capacity(x.len());
        let mut ys = Vec::new();
        for (i, rng) in rngs.iter_mut().enumerate() {
            let z = (s > 1 && !opts.deterministic).then(|| gaussian_like(&x[i], rng));
            let stepped = p_step(&x[i], s, &eps[i], resp, z.as_ref(), opts)?;
            if constrained {
                let y_prev = if s - 1 == 0 {
                    guides[i].clone()
                } else {
                    let e = gaussian_like(&guides[i], rng);
                    q_sample_step(&guides[i], s - 1, &e, resp)?
                };
                next.push(constrained_step(&stepped, &y_prev, &plan.filter)?);
                ys.push(y_prev);
            } else {
                next.push(stepped);
            }
        }
        x = next;
        if let Some(f) = observe.as_mut() {
            f(StepView {
                step: s - 1,
                x: &x,
                y: constrained.then_some(ys.as_slice()),
            });
        }
    }
    x.iter().zip(y0).map(|(xi, y)| decode_against(xi, y)).collect()
}

/// Pixel-domain decode `clip((x + 1) / 2)`, written as a correction to the
/// guide so a state equal to the encoded guide decodes to the guide
/// bit-for-bit.
fn decode_against(x: &Image, guide: &Image) -> Result<Image> {
    let mut out = guide.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let enc = 2.0 * *o - 1.0;
        *o = (*o + (v - enc) * 0.5).clamp(0.0, 1.0);
    }
    Ok(out)
}

fn single<D: Denoiser + ?Sized, R: Rng>(
    y0: &Image,
    plan: &SamplerPlan,
    denoiser: &D,
    resp: &RespacedSchedule,
    rng: &mut R,
) -> Result<Image> {
    let mut out = run_sampler(std::slice::from_ref(y0), plan, denoiser, resp, std::slice::from_mut(rng), None)?;
    Ok(out.remove(0))
}

/// Pseudo target for one restored image: noise to K, constrained reverse
/// steps down to L, unconditional steps to 0. `sched` is respaced to
/// `cfg.respaced_steps`.
pub fn generate_pseudo_target<D: Denoiser + ?Sized, R: Rng>(
    y0: &Image,
    cfg: &TargetGenConfig,
    denoiser: &D,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Image> {
    cfg.validate(sched.num_timesteps())?;
    let resp = sched.respace(cfg.respaced_steps)?;
    let plan = SamplerPlan::resolve(SamplerKind::Ours, cfg, &resp)?;
    single(y0, &plan, denoiser, &resp, rng)
}

/// Batched pseudo targets with one seeded stream per image.
pub fn generate_pseudo_targets<D: Denoiser + ?Sized>(
    y0: &[Image],
    kind: SamplerKind,
    cfg: &TargetGenConfig,
    denoiser: &D,
    sched: &NoiseSchedule,
    seeds: &[u64],
) -> Result<(Vec<Image>, StepMapping)> {
    if kind != SamplerKind::Difface && kind != SamplerKind::Ilvr {
        cfg.validate(sched.num_timesteps())?;
    }
    let resp = sched.respace(cfg.respaced_steps)?;
    let plan = SamplerPlan::resolve(kind, cfg, &resp)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let out = run_sampler(y0, &plan, denoiser, &resp, &mut rngs, None)?;
    let l = match kind {
        SamplerKind::Difface => cfg.k,
        SamplerKind::Ilvr => 0,
        _ => cfg.l,
    };
    Ok((out, plan.mapping(cfg.k, l, &resp)))
}

fn baseline_plan(k: usize, l: usize, filter: LowPassFilter, tail: Tail, resp: &RespacedSchedule) -> Result<SamplerPlan> {
    let t = resp.base().num_timesteps();
    if k > t || l > k {
        return Err(Error::Config(format!("need 0 <= L <= K <= T, got K={k} L={l} T={t}")));
    }
    Ok(SamplerPlan {
        k_step: resp.step_for_timestep(k),
        l_step: resp.step_for_timestep(l),
        filter,
        tail,
        variance: VarianceKind::Posterior,
        deterministic_tail: false,
    })
}

/// Unconditional reverse diffusion from the guide noised to `k`.
pub fn difface_sample<D: Denoiser + ?Sized, R: Rng>(
    y0: &Image,
    k: usize,
    denoiser: &D,
    resp: &RespacedSchedule,
    rng: &mut R,
) -> Result<Image> {
    let plan = baseline_plan(k, k, LowPassFilter::new(1)?, Tail::Unconditional, resp)?;
    single(y0, &plan, denoiser, resp, rng)
}

/// Low-frequency constraint on every step from `k` to 0.
pub fn ilvr_sample<D: Denoiser + ?Sized, R: Rng>(
    y0: &Image,
    k: usize,
    filter: &LowPassFilter,
    denoiser: &D,
    resp: &RespacedSchedule,
    rng: &mut R,
) -> Result<Image> {
    let plan = baseline_plan(k, 0, *filter, Tail::Unconditional, resp)?;
    single(y0, &plan, denoiser, resp, rng)
}

/// Constrained steps from `k` to `l`, then a one-step projection to the
/// clean estimate.
pub fn dr2_sample<D: Denoiser + ?Sized, R: Rng>(
    y0: &Image,
    k: usize,
    l: usize,
    filter: &LowPassFilter,
    denoiser: &D,
    resp: &RespacedSchedule,
    rng: &mut R,
) -> Result<Image> {
    let plan = baseline_plan(k, l, *filter, Tail::ProjectX0, resp)?;
    single(y0, &plan, denoiser, resp, rng)
}

/// Relative low-frequency gap `|phi(y_t) - phi(x_t)| / |phi(x_t)|` between
/// a clean image and its degraded-restored counterpart, both noised to
/// each timestep with the same `eps` (both pixel domain).
pub fn lowfreq_discrepancy(
    clean: &Image,
    restored: &Image,
    timesteps: &[usize],
    filter: &LowPassFilter,
    sched: &NoiseSchedule,
    eps: &Image,
) -> Result<Vec<f64>> {
    let x0 = clean.to_diffusion()?;
    let y0 = restored.to_diffusion()?;
    timesteps
        .iter()
        .map(|&t| {
            if t == 0 || t > sched.num_timesteps() {
                return Err(Error::Param(format!("timestep {t} outside 1..={}", sched.num_timesteps())));
            }
            let lx = filter.apply(&q_sample(&x0, t, eps, sched)?)?;
            let ly = filter.apply(&q_sample(&y0, t, eps, sched)?)?;
            let num = ly.zip_map(&lx, |a, b| a - b)?.norm_sq().sqrt();
            let den = lx.norm_sq().sqrt();
            if den == 0.0 {
                return Err(Error::Numeric("zero low-frequency energy".into()));
            }
            Ok(num / den)
        })
        .collect()
}

/// Mean absolute high-frequency residual `|x - phi(x)|`.
pub fn high_frequency_energy(x: &Image, filter: &LowPassFilter) -> Result<f64> {
    let low = filter.apply(x)?;
    Ok(x.data().iter().zip(low.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}
