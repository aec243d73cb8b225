//! Noise-prediction training for the diffusion prior, and plain ancestral
//! sampling for monitoring it.

use std::fs;
use std::path::Path;

use difadapt_nn::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule, ParamStore, Tape};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointManifest};
use crate::denoiser::Denoiser;
use crate::error::{Error, IoContext, Result};
use crate::image::{make_grid, to_tensor, Domain, Image};
use crate::schedule::{gaussian_like, p_step, q_sample, NoiseSchedule, RespacedSchedule, ScheduleConfig, StepOptions};
use crate::unet::{NetDenoiser, UNetConfig};

pub const DIFFUSION_KIND: &str = "diffusion";

/// One noised training batch: `x_t = q_sample(x0, t, eps)`.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub x_t: Vec<Image>,
    pub timesteps: Vec<usize>,
    pub eps: Vec<Image>,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per image (in that order).
pub fn noise_batch<R: Rng + ?Sized>(x0: &[Image], sched: &NoiseSchedule, rng: &mut R) -> Result<NoisedBatch> {
    if x0.is_empty() {
        return Err(Error::Param("empty training batch".into()));
    }
    let mut out = NoisedBatch {
        x_t: Vec::with_capacity(x0.len()),
        timesteps: Vec::with_capacity(x0.len()),
        eps: Vec::with_capacity(x0.len()),
    };
    for img in x0 {
        img.ensure_domain(Domain::Diffusion11)?;
        let t = rng.random_range(1..=sched.num_timesteps());
        let eps = gaussian_like(img, rng);
        out.x_t.push(q_sample(img, t, &eps, sched)?);
        out.timesteps.push(t);
        out.eps.push(eps);
    }
    Ok(out)
}

/// Mean squared noise-prediction error of any denoiser, without gradients.
pub fn ddpm_loss<D: Denoiser, R: Rng + ?Sized>(
    denoiser: &D,
    x0: &[Image],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let b = noise_batch(x0, sched, rng)?;
    let pred = denoiser.predict_eps(&b.x_t, &b.timesteps)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, e) in pred.iter().zip(&b.eps) {
        e.ensure_same_shape(p)?;
        sum += p.data().iter().zip(e.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += p.len();
    }
    Ok(sum / count as f64)
}

/// One optimizer step on the noise-prediction objective. Returns the
/// batch loss before the update.
pub fn ddpm_train_step<R: Rng + ?Sized>(
    model: &mut NetDenoiser,
    opt: &mut AdamW<f32>,
    x0: &[Image],
    sched: &NoiseSchedule,
    rng: &mut R,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let b = noise_batch(x0, sched, rng)?;
    let mut tape = Tape::new();
    let x = tape.input(to_tensor::<f32>(&b.x_t)?);
    let target = tape.input(to_tensor::<f32>(&b.eps)?);
    let pred = model.net.forward(&mut tape, &model.params.bind(true), x, &b.timesteps)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.sqr(diff);
    let loss = tape.mean_all(sq);
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite diffusion loss {value} at optimizer step {} (lr {:.3e}, timesteps {:?})",
            opt.steps_taken(),
            opt.current_lr(),
            b.timesteps
        )));
    }
    let mut grads = tape.backward(loss)?.for_store(&model.params);
    if let Some(max) = grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    opt.step(&mut model.params, &grads)
        .map_err(|e| Error::Training(format!("optimizer step {}: {e}", opt.steps_taken())))?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Decay of the weight average used for sampling; `None` samples with
    /// the raw weights.
    pub ema_decay: Option<f64>,
    pub hflip: bool,
    pub checkpoint_every: u64,
    /// Emit a sample sheet every this many steps (0 disables).
    pub sample_every: u64,
    pub sample_steps: usize,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 8,
            lr: 2e-4,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            ema_decay: Some(0.999),
            hflip: true,
            checkpoint_every: 2_000,
            sample_every: 5_000,
            sample_steps: 50,
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::default(),
            seed: 0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("diffusion training needs batch >= 1 and lr > 0".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay {d} outside [0, 1)")));
            }
        }
        self.schedule.build()?;
        Ok(())
    }

    /// Fields that must agree between a checkpoint and a resumed run.
    fn compatible(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            steps: 0,
            checkpoint_every: 0,
            sample_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

pub struct DiffusionTrainer {
    cfg: DiffusionTrainConfig,
    model: NetDenoiser,
    ema: Option<ParamStore<f32>>,
    opt: AdamW<f32>,
    sched: NoiseSchedule,
    rng: ChaCha8Rng,
    iteration: u64,
    losses: Vec<(u64, f64)>,
}

impl DiffusionTrainer {
    pub fn new(cfg: DiffusionTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = NetDenoiser::new(cfg.unet.clone(), &mut init_rng)?;
        let opt = AdamW::new(
            &model.params,
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            LrSchedule::Constant,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            sched: cfg.schedule.build()?,
            ema: cfg.ema_decay.map(|_| model.params.clone()),
            cfg,
            model,
            opt,
            rng,
            iteration: 0,
            losses: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`DiffusionTrainer::save`].
    /// `cfg` may extend `steps`; everything that shapes the trajectory must
    /// match the checkpoint.
    pub fn resume(cfg: DiffusionTrainConfig, dir: &Path) -> Result<Self> {
        let (ck, manifest) = Checkpoint::load(dir)?;
        if manifest.kind != DIFFUSION_KIND {
            return Err(Error::Dataset(format!("{} is a {} checkpoint", dir.display(), manifest.kind)));
        }
        let saved: DiffusionTrainConfig = serde_json::from_value(manifest.config.clone())
            .map_err(|e| Error::Dataset(format!("checkpoint config: {e}")))?;
        if !cfg.compatible(&saved) {
            return Err(Error::Config("resume config differs from the checkpoint's".into()));
        }
        let mut t = Self::new(cfg)?;
        ck.load_params("net", &mut t.model.params)?;
        ck.load_optimizer("net", &t.model.params, &mut t.opt, manifest.iteration)?;
        if let Some(ema) = &mut t.ema {
            ck.load_params("ema", ema)?;
        }
        t.iteration = manifest.iteration;
        t.rng.set_word_pos(manifest.rng_word_pos.unwrap_or(0));
        let csv = dir.join("loss.csv");
        if csv.exists() {
            t.losses = read_loss_csv(&csv)?
                .into_iter()
                .filter(|(s, _)| *s <= t.iteration)
                .collect();
        }
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn losses(&self) -> &[(u64, f64)] {
        &self.losses
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// The network used for sampling (weight average when enabled).
    pub fn denoiser(&self) -> NetDenoiser {
        let mut d = self.model.clone();
        if let Some(ema) = &self.ema {
            d.params = ema.clone();
        }
        d
    }

    pub fn step(&mut self, corpus: &[Image]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Dataset("empty diffusion training corpus".into()));
        }
        let mut batch = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let img = &corpus[self.rng.random_range(0..corpus.len())];
            let flip = self.cfg.hflip && self.rng.random_bool(0.5);
            batch.push(if flip { hflip(img) } else { img.clone() });
        }
        let loss = ddpm_train_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.sched,
            &mut self.rng,
            self.cfg.grad_clip,
        )?;
        if let (Some(ema), Some(decay)) = (&mut self.ema, self.cfg.ema_decay) {
            // short warm-up so early snapshots are not dominated by the init
            let d = decay.min((1.0 + self.iteration as f64) / (10.0 + self.iteration as f64));
            ema.ema_update(&self.model.params, d)?;
        }
        self.iteration += 1;
        self.losses.push((self.iteration, loss));
        Ok(loss)
    }

    /// Trains until `cfg.steps`, checkpointing into `out_dir` (when given)
    /// every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, corpus: &[Image], out_dir: Option<&Path>) -> Result<()> {
        for img in corpus {
            img.ensure_domain(Domain::Diffusion11)?;
            corpus[0].ensure_same_shape(img)?;
        }
        while self.iteration < self.cfg.steps {
            let loss = self.step(corpus)?;
            let it = self.iteration;
            if it % 500 == 0 {
                info!("diffusion step {it}: loss {loss:.4}");
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && it % self.cfg.checkpoint_every == 0 {
                    self.save(dir)?;
                }
                if self.cfg.sample_every > 0 && it % self.cfg.sample_every == 0 {
                    self.write_samples(&dir.join("samples"), corpus[0].shape())?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    fn write_samples(&self, dir: &Path, shape: (usize, usize, usize)) -> Result<()> {
        let resp = self.sched.respace(self.cfg.sample_steps.min(self.sched.num_timesteps()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(2);
        let imgs = sample_unconditional(&self.denoiser(), &resp, 16, shape, StepOptions::default(), &mut rng)?;
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        make_grid(&imgs, 4, 1)?.save_png(&dir.join(format!("iter_{:07}.png", self.iteration)))
    }

    pub fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        let mut ck = Checkpoint::new();
        ck.put_params("net", &self.model.params);
        ck.put_optimizer("net", &self.model.params, &self.opt);
        if let Some(ema) = &self.ema {
            ck.put_params("ema", ema);
        }
        let manifest = CheckpointManifest {
            kind: DIFFUSION_KIND.into(),
            iteration: self.iteration,
            seed: self.cfg.seed,
            rng_word_pos: Some(self.rng.get_word_pos()),
            config: serde_json::to_value(&self.cfg).expect("serializable"),
            tensor_sha256: String::new(),
            extra: Default::default(),
        };
        let m = ck.save(dir, manifest)?;
        write_loss_csv(&dir.join("loss.csv"), &self.losses)?;
        Ok(m)
    }
}

/// Loads the sampling network and schedule from a diffusion checkpoint.
pub fn load_diffusion(dir: &Path) -> Result<(NetDenoiser, ScheduleConfig, CheckpointManifest)> {
    let (ck, manifest) = Checkpoint::load(dir)?;
    if manifest.kind != DIFFUSION_KIND {
        return Err(Error::Dataset(format!("{} is a {} checkpoint", dir.display(), manifest.kind)));
    }
    let cfg: DiffusionTrainConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Dataset(format!("checkpoint config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut d = NetDenoiser::new(cfg.unet.clone(), &mut rng)?;
    let group = if ck.has_group("ema") { "ema" } else { "net" };
    ck.load_params(group, &mut d.params)?;
    Ok((d, cfg.schedule, manifest))
}

pub fn write_loss_csv(path: &Path, rows: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    w.write_record(["step", "loss"]).map_err(wrap)?;
    for (s, l) in rows {
        w.write_record([s.to_string(), l.to_string()]).map_err(wrap)?;
    }
    w.flush().ctx(|| format!("writing {}", path.display()))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(u64, f64)>> {
    let wrap = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(wrap)?;
        let parse_err = || Error::Dataset(format!("{}: malformed row", path.display()));
        let s = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        let l = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        out.push((s, l));
    }
    Ok(out)
}

pub fn hflip(img: &Image) -> Image {
    let (c, h, w) = img.shape();
    let mut out = img.clone();
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Ancestral sampling from pure noise over every step of `resp`; returns
/// pixel-domain images.
pub fn sample_unconditional<D: Denoiser, R: Rng + ?Sized>(
    denoiser: &D,
    resp: &RespacedSchedule,
    count: usize,
    shape: (usize, usize, usize),
    opts: StepOptions,
    rng: &mut R,
) -> Result<Vec<Image>> {
    let (c, h, w) = shape;
    let proto = Image::filled(c, h, w, Domain::Diffusion11, 0.0)?;
    let mut xs: Vec<Image> = (0..count).map(|_| gaussian_like(&proto, rng)).collect();
    for s in (1..=resp.num_steps()).rev() {
        let ts = vec![resp.timestep(s); count];
        let eps = denoiser.predict_eps(&xs, &ts)?;
        xs = xs
            .iter()
            .zip(&eps)
            .map(|(x, e)| {
                let z = (s > 1 && !opts.deterministic).then(|| gaussian_like(x, rng));
                p_step(x, s, e, resp, z.as_ref(), opts)
            })
            .collect::<Result<_>>()?;
    }
    xs.iter().map(Image::to_pixel).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{KnownCleanDenoiser, ZeroDenoiser};
    use crate::schedule::make_schedule;

    fn toy(n: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
                Image::new(3, 8, 8, Domain::Diffusion11, v).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_predictor_loss_is_unit_noise_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = toy(256, &mut rng);
        let l = ddpm_loss(&ZeroDenoiser, &x0, &s, &mut rng).unwrap();
        assert!((l - 1.0).abs() < 0.05, "{l}");
    }

    #[test]
    fn oracle_predictor_loss_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = toy(8, &mut rng);
        let oracle = KnownCleanDenoiser::new(x0.clone(), s.clone()).unwrap();
        let l = ddpm_loss(&oracle, &x0, &s, &mut rng).unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn hflip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = toy(1, &mut rng).remove(0);
        assert_ne!(hflip(&x), x);
        assert_eq!(hflip(&hflip(&x)), x);
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![(1, 0.5), (2, 0.125), (3, 1e-7)];
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &rows).unwrap();
        assert_eq!(read_loss_csv(&p).unwrap(), rows);
    }
}
