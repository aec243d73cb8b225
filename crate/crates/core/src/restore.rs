//! Restorer training: supervised pretraining on synthetic classic
//! degradations and fine-tuning on (input, pseudo target) pairs, both with
//! an adversarially trained discriminator.

use std::path::Path;

use difadapt_nn::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule, ParamStore, Tape};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{snapshot_dir, Checkpoint, CheckpointManifest};
use crate::degrade::{classic_degrade, ClassicRanges};
use crate::error::{Error, IoContext, Result};
use crate::features::{lpips_distance, FeatureConfig, RandomConvFeatures};
use crate::image::{to_tensor, Domain, Image};
use crate::losses::{discriminator_loss, total_loss, GanForm, LossWeights};
use crate::metrics::psnr;
use crate::restorer::{Discriminator, DiscriminatorConfig, RestorerConfig, RestorerModel};

pub const RESTORER_KIND: &str = "restorer";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrShape {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Discriminator learning rate.
    pub d_lr: f64,
    pub iters: u64,
    pub batch: usize,
    pub schedule: LrShape,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub gan_form: GanForm,
    /// Iteration from which the adversarial term enters the restorer loss;
    /// the discriminator trains from the first iteration.
    pub gan_start: u64,
    /// Evaluate on the held-out set every this many iterations (0: never).
    pub eval_every: u64,
    /// Write a snapshot every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub restorer: RestorerConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            d_lr: 1e-4,
            iters: 20_000,
            batch: 8,
            schedule: LrShape::Constant,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
            weights: LossWeights::default(),
            gan_form: GanForm::Saturating,
            gan_start: 0,
            eval_every: 0,
            checkpoint_every: 0,
            log_every: 100,
            restorer: RestorerConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.d_lr > 0.0 && self.d_lr.is_finite()) {
            return Err(Error::Config(format!("learning rates must be > 0 (lr {}, d_lr {})", self.lr, self.d_lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.weights.validate()?;
        self.restorer.validate()
    }

    fn lr_schedule(&self) -> LrSchedule {
        match self.schedule {
            LrShape::Constant => LrSchedule::Constant,
            LrShape::Cosine => LrSchedule::Cosine { total: self.iters },
        }
    }
}

/// One logged optimizer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: u64,
    pub total: f64,
    pub l1: f64,
    pub lpips: f64,
    pub gan_g: f64,
    pub d_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iter: u64,
    pub psnr: f64,
    pub lpips: f64,
}

/// Held-out (input, ground truth) pairs scored during training.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub lq: Vec<Image>,
    pub gt: Vec<Image>,
}

/// Where training inputs and targets come from.
#[derive(Clone, Copy, Debug)]
pub enum PairSource<'a> {
    /// Clean images degraded on the fly with freshly sampled classic
    /// parameters.
    Synthetic { hq: &'a [Image], ranges: &'a ClassicRanges },
    /// Fixed aligned (input, target) pairs.
    Pairs { lq: &'a [Image], target: &'a [Image] },
}

impl PairSource<'_> {
    fn validate(&self) -> Result<()> {
        let all: Vec<&Image> = match self {
            PairSource::Synthetic { hq, ranges } => {
                ranges.validate()?;
                hq.iter().collect()
            }
            PairSource::Pairs { lq, target } => {
                if lq.len() != target.len() {
                    return Err(Error::Dataset(format!("{} inputs vs {} targets", lq.len(), target.len())));
                }
                lq.iter().chain(target.iter()).collect()
            }
        };
        let first = all.first().ok_or_else(|| Error::Dataset("empty training set".into()))?;
        for img in &all {
            img.ensure_domain(Domain::Pixel01)?;
            first.ensure_same_shape(img)?;
        }
        Ok(())
    }

    fn len(&self) -> usize {
        match self {
            PairSource::Synthetic { hq, .. } => hq.len(),
            PairSource::Pairs { lq, .. } => lq.len(),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Vec<Image>, Vec<Image>)> {
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..self.len());
            match self {
                PairSource::Synthetic { hq, ranges } => {
                    let p = ranges.sample(&hq[i], rng);
                    inputs.push(classic_degrade(&hq[i], &p, rng)?);
                    targets.push(hq[i].clone());
                }
                PairSource::Pairs { lq, target } => {
                    inputs.push(lq[i].clone());
                    targets.push(target[i].clone());
                }
            }
        }
        Ok((inputs, targets))
    }
}

pub struct RestoreTrainer {
    cfg: TrainConfig,
    stage: String,
    model: RestorerModel,
    disc: Discriminator,
    disc_params: ParamStore<f32>,
    opt_g: AdamW<f32>,
    opt_d: AdamW<f32>,
    feat: RandomConvFeatures<f32>,
    eval_feat: Option<RandomConvFeatures<f64>>,
    rng: ChaCha8Rng,
    iteration: u64,
    losses: Vec<LossRow>,
    evals: Vec<EvalRow>,
}

impl RestoreTrainer {
    /// Starts from `model` (a fresh restorer when `None`) with a fresh
    /// discriminator. Seed streams: 0 restorer init, 1 discriminator init,
    /// 2 batch sampling.
    pub fn new(cfg: TrainConfig, model: Option<RestorerModel>, stage: &str) -> Result<Self> {
        cfg.validate()?;
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        let model = match model {
            Some(m) => m,
            None => RestorerModel::new(cfg.restorer.clone(), &mut stream(0))?,
        };
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(cfg.discriminator.clone(), &mut disc_params, &mut stream(1))?;
        let opt_g = AdamW::new(
            &model.params,
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            cfg.lr_schedule(),
        );
        let opt_d = AdamW::new(
            &disc_params,
            AdamWConfig {
                lr: cfg.d_lr,
                beta1: 0.5,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            cfg.lr_schedule(),
        );
        Ok(Self {
            feat: RandomConvFeatures::new(cfg.features.clone())?,
            eval_feat: None,
            rng: stream(2),
            stage: stage.to_string(),
            cfg,
            model,
            disc,
            disc_params,
            opt_g,
            opt_d,
            iteration: 0,
            losses: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn model(&self) -> &RestorerModel {
        &self.model
    }

    pub fn into_model(self) -> RestorerModel {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn losses(&self) -> &[LossRow] {
        &self.losses
    }

    pub fn evals(&self) -> &[EvalRow] {
        &self.evals
    }

    /// One restorer update followed by one discriminator update (skipped
    /// when the adversarial weight is zero). `real` feeds the
    /// discriminator's real branch; the fake branch is always restorer
    /// output.
    pub fn step(&mut self, source: PairSource<'_>, real: &[Image]) -> Result<LossRow> {
        let use_gan = self.cfg.weights.lambda_gan > 0.0;
        if use_gan && real.is_empty() {
            return Err(Error::Dataset("adversarial training needs a non-empty real set".into()));
        }
        let (inputs, targets) = source.draw(self.cfg.batch, &mut self.rng)?;
        let reals: Vec<Image> = if use_gan {
            (0..self.cfg.batch)
                .map(|_| real[self.rng.random_range(0..real.len())].clone())
                .collect()
        } else {
            Vec::new()
        };

        let mut weights = self.cfg.weights;
        if self.iteration < self.cfg.gan_start {
            weights.lambda_gan = 0.0;
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.input(to_tensor(&inputs)?);
        let y = tape.input(to_tensor(&targets)?);
        let pred = self.model.net.forward(&mut tape, &self.model.params.bind(true), x)?;
        let terms = total_loss(
            &mut tape,
            pred,
            y,
            &self.disc,
            &self.disc_params.bind(false),
            &self.feat,
            weights,
            self.cfg.gan_form,
        )?;
        let [total, l1, lpips, gan_g] = terms.values(&tape);
        if !total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite restorer loss {total} at iteration {} (l1 {l1}, lpips {lpips}, gan {gan_g})",
                self.iteration + 1
            )));
        }
        let mut grads = tape.backward(terms.total)?.for_store(&self.model.params);
        if let Some(max) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let fake = tape.take_value(pred);

        let mut d_loss = 0.0;
        let mut d_grads = None;
        if use_gan {
            let mut dt = Tape::<f32>::new();
            let f = dt.input(fake.map(|v| v.clamp(0.0, 1.0)));
            let r = dt.input(to_tensor(&reals)?);
            let dp = self.disc_params.bind(true);
            let pf = self.disc.forward(&mut dt, &dp, f)?;
            let pr = self.disc.forward(&mut dt, &dp, r)?;
            let dl = discriminator_loss(&mut dt, pf, pr)?;
            d_loss = dt.value(dl).item() as f64;
            if !d_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite discriminator loss at iteration {}",
                    self.iteration + 1
                )));
            }
            let mut g = dt.backward(dl)?.for_store(&self.disc_params);
            if let Some(max) = self.cfg.grad_clip {
                clip_grad_norm(&mut g, max);
            }
            d_grads = Some(g);
        }
        self.opt_g.step(&mut self.model.params, &grads)?;
        if let Some(g) = d_grads {
            self.opt_d.step(&mut self.disc_params, &g)?;
        }
        self.iteration += 1;
        let row = LossRow {
            iter: self.iteration,
            total,
            l1,
            lpips,
            gan_g,
            d_loss,
        };
        self.losses.push(row);
        Ok(row)
    }

    /// Mean PSNR and perceptual distance of the current restorer on `set`.
    pub fn evaluate(&mut self, set: &EvalSet) -> Result<EvalRow> {
        if self.eval_feat.is_none() {
            self.eval_feat = Some(RandomConvFeatures::new(self.cfg.features.clone())?);
        }
        let out = self.model.restore(&set.lq)?;
        let n = out.len().max(1) as f64;
        let mut p = 0.0;
        for (o, g) in out.iter().zip(&set.gt) {
            p += psnr(o, g, 1.0)?;
        }
        let l = lpips_distance(self.eval_feat.as_ref().expect("set above"), &out, &set.gt)?;
        let row = EvalRow {
            iter: self.iteration,
            psnr: p / n,
            lpips: l.iter().sum::<f64>() / n,
        };
        self.evals.push(row);
        Ok(row)
    }

    /// Trains to `cfg.iters`. With `out_dir`, writes periodic snapshots,
    /// a final checkpoint, and on divergence a `last_good` checkpoint of
    /// the state before the failing step.
    pub fn run(
        &mut self,
        source: PairSource<'_>,
        real: &[Image],
        eval: Option<&EvalSet>,
        out_dir: Option<&Path>,
    ) -> Result<()> {
        source.validate()?;
        if let Some(set) = eval {
            if set.lq.len() != set.gt.len() || set.lq.is_empty() {
                return Err(Error::Dataset("evaluation set needs matching, non-empty inputs and targets".into()));
            }
            if self.cfg.eval_every > 0 && self.iteration == 0 {
                self.evaluate(set)?;
            }
        }
        while self.iteration < self.cfg.iters {
            let row = match self.step(source, real) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = out_dir {
                        self.save(&dir.join("last_good"))?;
                    }
                    return Err(e);
                }
            };
            let it = self.iteration;
            if self.cfg.log_every > 0 && it % self.cfg.log_every == 0 {
                info!(
                    "{} iter {it}: total {:.4} l1 {:.4} lpips {:.4} g {:.4} d {:.4}",
                    self.stage, row.total, row.l1, row.lpips, row.gan_g, row.d_loss
                );
            }
            if let Some(set) = eval {
                if self.cfg.eval_every > 0 && it % self.cfg.eval_every == 0 {
                    let e = self.evaluate(set)?;
                    info!("{} iter {it}: eval psnr {:.3} lpips {:.4}", self.stage, e.psnr, e.lpips);
                }
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && it % self.cfg.checkpoint_every == 0 && it < self.cfg.iters {
                    self.save(&snapshot_dir(dir, it))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        let mut ck = Checkpoint::new();
        ck.put_params("restorer", &self.model.params);
        ck.put_optimizer("restorer", &self.model.params, &self.opt_g);
        ck.put_params("disc", &self.disc_params);
        ck.put_optimizer("disc", &self.disc_params, &self.opt_d);
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("stage".to_string(), serde_json::Value::from(self.stage.clone()));
        let manifest = CheckpointManifest {
            kind: RESTORER_KIND.into(),
            iteration: self.iteration,
            seed: self.cfg.seed,
            rng_word_pos: Some(self.rng.get_word_pos()),
            config: serde_json::to_value(&self.cfg).expect("serializable"),
            tensor_sha256: String::new(),
            extra,
        };
        let m = ck.save(dir, manifest)?;
        write_rows(&dir.join("loss.csv"), &self.losses)?;
        if !self.evals.is_empty() {
            write_rows(&dir.join("eval.csv"), &self.evals)?;
        }
        Ok(m)
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let wrap = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for r in rows {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().ctx(|| format!("writing {}", path.display()))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let wrap = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    r.deserialize().map(|row| row.map_err(wrap)).collect()
}

/// Loads the restorer weights of a checkpoint written by
/// [`RestoreTrainer::save`].
pub fn load_restorer(dir: &Path) -> Result<(RestorerModel, CheckpointManifest)> {
    let (ck, manifest) = Checkpoint::load(dir)?;
    if manifest.kind != RESTORER_KIND {
        return Err(Error::Dataset(format!("{} is a {} checkpoint", dir.display(), manifest.kind)));
    }
    let cfg: TrainConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Dataset(format!("checkpoint config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = RestorerModel::new(cfg.restorer, &mut rng)?;
    ck.load_params("restorer", &mut model.params)?;
    Ok((model, manifest))
}

/// Supervised pretraining on clean images degraded on the fly with random
/// classic parameters; the clean corpus also serves as the discriminator's
/// real distribution.
pub fn pretrain_restorer(
    cfg: TrainConfig,
    hq: &[Image],
    ranges: &ClassicRanges,
    eval: Option<&EvalSet>,
    out_dir: Option<&Path>,
) -> Result<RestoreTrainer> {
    let mut t = RestoreTrainer::new(cfg, None, "pretrain")?;
    t.run(PairSource::Synthetic { hq, ranges }, hq, eval, out_dir)?;
    Ok(t)
}

/// Fine-tunes `model` on aligned (input, pseudo target) pairs against a
/// fresh discriminator whose real distribution is `real` (never the
/// evaluation ground truth).
pub fn finetune_restorer(
    cfg: TrainConfig,
    model: RestorerModel,
    lq: &[Image],
    targets: &[Image],
    real: &[Image],
    eval: Option<&EvalSet>,
    out_dir: Option<&Path>,
) -> Result<RestoreTrainer> {
    if model.net.config() != &cfg.restorer {
        return Err(Error::Config("fine-tune config describes a different restorer than the checkpoint".into()));
    }
    let mut t = RestoreTrainer::new(cfg, Some(model), "finetune")?;
    t.run(PairSource::Pairs { lq, target: targets }, real, eval, out_dir)?;
    Ok(t)
}
