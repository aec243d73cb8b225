use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{stage_seed, RunConfig};
use crate::checkpoint::{hash_file, hash_json, read_json, write_json, MANIFEST_FILE, TENSOR_FILE};
use crate::corpus::generate_faces;
use crate::ddpm::{load_diffusion, DiffusionTrainer};
use crate::degrade::{build_dataset_from_images, load_image_dir, DatasetManifest, Split};
use crate::error::{Error, IoContext, Result};
use crate::features::RandomConvFeatures;
use crate::guidance::{generate_pseudo_targets, SamplerKind, StepMapping, TargetGenConfig};
use crate::image::{make_grid, Image};
use crate::metrics::{comparison_table, score_images, MetricsReport, MetricsSummary, ReportMeta, FID_NOTE};
use crate::restore::{finetune_restorer, load_restorer, pretrain_restorer, EvalSet};
use crate::restorer::RestorerModel;
use crate::schedule::NoiseSchedule;
use crate::unet::NetDenoiser;

pub const DATASET_DIR: &str = "dataset";
pub const DIFFUSION_DIR: &str = "diffusion";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const PAIRS_DIR: &str = "pairs";
pub const FINETUNE_DIR: &str = "finetune";
pub const EVAL_DIR: &str = "eval";
pub const ABLATION_DIR: &str = "ablation";
/// Per-directory record of the command and configuration that wrote it.
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// Cache key of the stage (hash of everything the output depends on).
    pub key: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub inputs: serde_json::Value,
}

impl RunRecord {
    pub fn new(command: &str, key: String, cfg: &RunConfig, inputs: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            key,
            config_sha256: hash_json(cfg),
            config: serde_json::to_value(cfg).expect("serializable"),
            inputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(RUN_FILE))
    }
}

fn hash_if_exists(path: &Path) -> Result<Option<String>> {
    if path.exists() {
        hash_file(path).map(Some)
    } else {
        Ok(None)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))
}

/// Clean training images in pixel range.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<Image>> {
    match &cfg.paths.corpus_dir {
        Some(dir) => {
            let imgs: Vec<Image> = load_image_dir(&cfg.resolve(dir), Some(cfg.corpus.size))?
                .into_iter()
                .map(|(_, i)| i)
                .collect();
            if imgs.is_empty() {
                return Err(Error::Dataset(format!("no images in {}", dir.display())));
            }
            Ok(imgs)
        }
        None => generate_faces(cfg.corpus.count, cfg.corpus.size, cfg.seed_for("corpus")),
    }
}

/// Named clean images the evaluation dataset is degraded from.
pub fn load_sources(cfg: &RunConfig) -> Result<Vec<(String, Image)>> {
    match &cfg.paths.source_dir {
        Some(dir) => load_image_dir(&cfg.resolve(dir), Some(cfg.corpus.size)),
        None => {
            let n = cfg.dataset.fit + cfg.dataset.eval;
            Ok(generate_faces(n, cfg.corpus.size, cfg.seed_for("source"))?
                .into_iter()
                .enumerate()
                .map(|(i, img)| (format!("face_{i:05}"), img))
                .collect())
        }
    }
}

/// Discriminator "real" images for fine-tuning.
pub fn load_real(cfg: &RunConfig) -> Result<Vec<Image>> {
    match &cfg.paths.real_dir {
        Some(dir) => {
            let imgs: Vec<Image> = load_image_dir(&cfg.resolve(dir), Some(cfg.corpus.size))?
                .into_iter()
                .map(|(_, i)| i)
                .collect();
            if imgs.is_empty() {
                return Err(Error::Dataset(format!("no images in {}", dir.display())));
            }
            Ok(imgs)
        }
        None => load_corpus(cfg),
    }
}

fn or_work(cfg: &RunConfig, given: Option<&Path>, default: &str) -> PathBuf {
    given.map_or_else(|| cfg.work_dir().join(default), |p| cfg.resolve(p))
}

// ---------------------------------------------------------------- degrade

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegradePlan {
    pub out: PathBuf,
    pub sources: usize,
    pub fit: usize,
    pub eval: usize,
    pub seed: u64,
    pub degradation: crate::degrade::DegradationConfig,
}

impl fmt::Display for DegradePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "degrade {} source images into {}", self.fit + self.eval, self.out.display())?;
        writeln!(f, "  fit split:  {}", self.fit)?;
        writeln!(f, "  eval split: {}", self.eval)?;
        writeln!(f, "  seed:       {}", self.seed)?;
        write!(
            f,
            "  recipe:     {}",
            serde_json::to_string(&self.degradation).expect("serializable")
        )
    }
}

/// Builds the degraded dataset; with `dry_run` only the plan is returned.
pub fn cmd_degrade(cfg: &RunConfig, out: Option<&Path>, dry_run: bool) -> Result<(DegradePlan, Option<PathBuf>)> {
    cfg.validate()?;
    let out = or_work(cfg, out, DATASET_DIR);
    let sources = load_sources(cfg)?;
    let plan = DegradePlan {
        out: out.clone(),
        sources: sources.len(),
        fit: cfg.dataset.fit,
        eval: cfg.dataset.eval,
        seed: cfg.seed_for("degrade"),
        degradation: cfg.dataset.degradation.clone(),
    };
    if dry_run {
        return Ok((plan, None));
    }
    build_dataset_from_images(
        &sources,
        &out,
        &cfg.dataset.degradation,
        (cfg.dataset.fit, cfg.dataset.eval),
        plan.seed,
        Some(cfg.corpus.size),
    )?;
    RunRecord::new("degrade", dataset_key(cfg), cfg, json!({})).write(&out)?;
    Ok((plan, Some(out.join(DatasetManifest::FILE))))
}

// ------------------------------------------------------- train-diffusion

/// Trains (or resumes) the diffusion prior on the clean corpus.
pub fn cmd_train_diffusion(cfg: &RunConfig, out: Option<&Path>, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = or_work(cfg, out, DIFFUSION_DIR);
    let dcfg = cfg.diffusion_config();
    let corpus = load_corpus(cfg)?
        .iter()
        .map(Image::to_diffusion)
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = if resume && dir.join(MANIFEST_FILE).exists() {
        let t = DiffusionTrainer::resume(dcfg, &dir)?;
        info!("resuming diffusion training at step {}", t.iteration());
        t
    } else {
        DiffusionTrainer::new(dcfg)?
    };
    trainer.run(&corpus, Some(&dir))?;
    RunRecord::new("train-diffusion", diffusion_key(cfg), cfg, json!({})).write(&dir)?;
    Ok(dir)
}

// ----------------------------------------------------- pretrain-restorer

/// Pre-trains the restorer on classic degradations of the clean corpus.
pub fn cmd_pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = or_work(cfg, out, PRETRAIN_DIR);
    let hq = load_corpus(cfg)?;
    pretrain_restorer(cfg.pretrain_config(), &hq, &cfg.pretrain.ranges, None, Some(&dir))?;
    RunRecord::new("pretrain-restorer", pretrain_key(cfg), cfg, json!({})).write(&dir)?;
    Ok(dir)
}

// ------------------------------------------------------------ gen-targets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub name: String,
    /// Seed of this image's sampling stream.
    pub seed: u64,
    pub lq_sha256: String,
    pub guide_sha256: String,
    pub target_sha256: String,
}

/// Layout: `{dir}/lq/`, `{dir}/restored/` (absent when the input guided
/// sampling directly), `{dir}/targets/`, and this manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairsManifest {
    pub split: Split,
    pub sampler: SamplerKind,
    pub generator: TargetGenConfig,
    pub skip_restorer: bool,
    pub mapping: StepMapping,
    pub schedule_sha256: String,
    pub diffusion_sha256: String,
    pub restorer_sha256: Option<String>,
    pub dataset_sha256: String,
    pub entries: Vec<PairEntry>,
}

impl PairsManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    /// `(names, inputs, targets)` of the first `limit` pairs (all when `None`).
    pub fn load_pairs(&self, dir: &Path, limit: Option<usize>) -> Result<(Vec<String>, Vec<Image>, Vec<Image>)> {
        let n = limit.unwrap_or(self.entries.len());
        if n > self.entries.len() || n == 0 {
            return Err(Error::Dataset(format!(
                "requested {n} pairs, {} has {}",
                dir.display(),
                self.entries.len()
            )));
        }
        let mut names = Vec::with_capacity(n);
        let mut lq = Vec::with_capacity(n);
        let mut tg = Vec::with_capacity(n);
        for e in &self.entries[..n] {
            names.push(e.name.clone());
            lq.push(Image::load_png(&dir.join("lq").join(&e.name))?);
            tg.push(Image::load_png(&dir.join("targets").join(&e.name))?);
        }
        Ok((names, lq, tg))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TargetOpts {
    pub dataset: Option<PathBuf>,
    pub restorer: Option<PathBuf>,
    pub diffusion: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Defaults to the fit split.
    pub split: Option<Split>,
    pub limit: Option<usize>,
}

/// Pseudo targets for pixel-range guides; image `names[i]` samples with
/// seed `stage_seed(root_seed, names[i])`, independent of batching.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_targets(
    guides: &[Image],
    names: &[String],
    kind: SamplerKind,
    gen: &TargetGenConfig,
    denoiser: &NetDenoiser,
    sched: &NoiseSchedule,
    root_seed: u64,
    chunk: usize,
) -> Result<(Vec<Image>, StepMapping, Vec<u64>)> {
    if guides.len() != names.len() || guides.is_empty() {
        return Err(Error::Dataset(format!("{} guides for {} names", guides.len(), names.len())));
    }
    let seeds: Vec<u64> = names.iter().map(|n| stage_seed(root_seed, n)).collect();
    let mut out = Vec::with_capacity(guides.len());
    let mut mapping = None;
    for (i, (g, s)) in guides.chunks(chunk.max(1)).zip(seeds.chunks(chunk.max(1))).enumerate() {
        let (t, m) = generate_pseudo_targets(g, kind, gen, denoiser, sched, s)?;
        out.extend(t);
        mapping = Some(m);
        info!("targets: {}/{} (chunk {i})", out.len(), guides.len());
    }
    Ok((out, mapping.expect("non-empty"), seeds))
}

fn load_split_checked(root: &Path, split: Split) -> Result<(DatasetManifest, Vec<(String, Image, Option<Image>)>)> {
    let manifest = DatasetManifest::load(root)?;
    let items = manifest.load_split(root, split)?;
    if items.is_empty() {
        return Err(Error::Dataset(format!("{} has no {} images", root.display(), split.as_str())));
    }
    Ok((manifest, items))
}

/// Restores the chosen split, samples one pseudo target per image and
/// writes the pair directory.
pub fn cmd_gen_targets(cfg: &RunConfig, opts: &TargetOpts) -> Result<(PathBuf, PairsManifest)> {
    cfg.validate()?;
    let dataset = or_work(cfg, opts.dataset.as_deref(), DATASET_DIR);
    let diffusion = or_work(cfg, opts.diffusion.as_deref(), DIFFUSION_DIR);
    let restorer = or_work(cfg, opts.restorer.as_deref(), PRETRAIN_DIR);
    let out = or_work(cfg, opts.out.as_deref(), PAIRS_DIR);
    let split = opts.split.unwrap_or(Split::Fit);
    let (_, mut items) = load_split_checked(&dataset, split)?;
    if let Some(n) = opts.limit {
        items.truncate(n);
    }
    let (den, sched_cfg, dman) = load_diffusion(&diffusion)?;
    if sched_cfg != cfg.schedule() {
        return Err(Error::Config("diffusion checkpoint was trained with a different schedule".into()));
    }
    let sched = sched_cfg.build()?;
    let names: Vec<String> = items.iter().map(|(n, _, _)| n.clone()).collect();
    let lq: Vec<Image> = items.into_iter().map(|(_, l, _)| l).collect();
    let skip = cfg.targets.skip_restorer;
    let (guides, restorer_sha) = if skip {
        (lq.clone(), None)
    } else {
        let (model, rman) = load_restorer(&restorer)?;
        (model.restore(&lq)?, Some(rman.tensor_sha256))
    };
    let (targets, mapping, seeds) = synthesize_targets(
        &guides,
        &names,
        cfg.targets.sampler,
        &cfg.targets.generator,
        &den,
        &sched,
        cfg.seed_for("targets"),
        cfg.targets.chunk,
    )?;
    let mut entries = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let lq_path = out.join("lq").join(name);
        lq[i].save_png(&lq_path)?;
        let guide_path = if skip {
            lq_path.clone()
        } else {
            let p = out.join("restored").join(name);
            guides[i].save_png(&p)?;
            p
        };
        let target_path = out.join("targets").join(name);
        targets[i].save_png(&target_path)?;
        entries.push(PairEntry {
            name: name.clone(),
            seed: seeds[i],
            lq_sha256: hash_file(&lq_path)?,
            guide_sha256: hash_file(&guide_path)?,
            target_sha256: hash_file(&target_path)?,
        });
    }
    let manifest = PairsManifest {
        split,
        sampler: cfg.targets.sampler,
        generator: cfg.targets.generator,
        skip_restorer: skip,
        mapping,
        schedule_sha256: hash_json(&cfg.schedule()),
        diffusion_sha256: dman.tensor_sha256,
        restorer_sha256: restorer_sha,
        dataset_sha256: hash_file(&dataset.join(DatasetManifest::FILE))?,
        entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let k = targets_key(cfg);
    RunRecord::new("gen-targets", k, cfg, json!({ "limit": opts.limit, "split": split })).write(&out)?;
    let sheet: Vec<Image> = lq
        .iter()
        .zip(&guides)
        .zip(&targets)
        .take(8)
        .flat_map(|((a, b), c)| [a.clone(), b.clone(), c.clone()])
        .collect();
    make_grid(&sheet, 3, 1)?.save_png(&out.join("grid.png"))?;
    Ok((out, manifest))
}

// --------------------------------------------------------------- finetune

#[derive(Clone, Debug, Default)]
pub struct FinetuneOpts {
    pub restorer: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    /// Dataset whose eval split is scored during training, if it exists.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Use only the first `limit` pairs.
    pub limit: Option<usize>,
}

fn eval_set(dataset: &Path) -> Result<Option<(Vec<String>, EvalSet)>> {
    if !dataset.join(DatasetManifest::FILE).exists() {
        return Ok(None);
    }
    let (_, items) = load_split_checked(dataset, Split::Eval)?;
    let mut names = Vec::new();
    let mut set = EvalSet { lq: Vec::new(), gt: Vec::new() };
    for (n, lq, gt) in items {
        let gt = gt.ok_or_else(|| Error::Dataset(format!("eval image {n} has no ground truth")))?;
        names.push(n);
        set.lq.push(lq);
        set.gt.push(gt);
    }
    Ok(Some((names, set)))
}

/// Fine-tunes the pre-trained restorer on (input, pseudo target) pairs.
pub fn cmd_finetune(cfg: &RunConfig, opts: &FinetuneOpts) -> Result<PathBuf> {
    cfg.validate()?;
    let restorer = or_work(cfg, opts.restorer.as_deref(), PRETRAIN_DIR);
    let pairs = or_work(cfg, opts.pairs.as_deref(), PAIRS_DIR);
    let dataset = or_work(cfg, opts.dataset.as_deref(), DATASET_DIR);
    let out = or_work(cfg, opts.out.as_deref(), FINETUNE_DIR);
    let (model, _) = load_restorer(&restorer)?;
    let manifest = PairsManifest::load(&pairs)?;
    let (_, lq, targets) = manifest.load_pairs(&pairs, opts.limit)?;
    let real = load_real(cfg)?;
    let eval = eval_set(&dataset)?;
    info!("fine-tuning on {} pairs from {}", lq.len(), pairs.display());
    finetune_restorer(
        cfg.finetune_config(),
        model,
        &lq,
        &targets,
        &real,
        eval.as_ref().map(|(_, s)| s),
        Some(&out),
    )?;
    let key = finetune_key(cfg, opts.limit);
    RunRecord::new("finetune", key, cfg, json!({ "limit": opts.limit, "pairs": lq.len() })).write(&out)?;
    Ok(out)
}

// --------------------------------------------------------------- evaluate

#[derive(Clone, Debug, Default)]
pub struct EvalOpts {
    pub checkpoint: Option<PathBuf>,
    /// Reference checkpoint scored alongside (defaults to the pre-trained
    /// restorer when it exists).
    pub baseline: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Images in the side-by-side sheet (0 disables it).
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: MetricsReport,
    pub baseline: Option<MetricsReport>,
    /// The degraded inputs scored as they are.
    pub input: MetricsReport,
    pub table: String,
}

fn meta(dataset: &Path, ck_sha: String, config: serde_json::Value, cfg: &RunConfig) -> Result<ReportMeta> {
    Ok(ReportMeta {
        dataset_sha256: hash_if_exists(&dataset.join(DatasetManifest::FILE))?.unwrap_or_default(),
        checkpoint_sha256: ck_sha,
        config,
        feature_seed: cfg.metrics.seed,
        note: FID_NOTE.into(),
    })
}

/// Scores a restorer checkpoint on the dataset's eval split.
pub fn cmd_evaluate(cfg: &RunConfig, opts: &EvalOpts) -> Result<EvalOutcome> {
    cfg.validate()?;
    let ck = or_work(cfg, opts.checkpoint.as_deref(), FINETUNE_DIR);
    let dataset = or_work(cfg, opts.dataset.as_deref(), DATASET_DIR);
    let out = or_work(cfg, opts.out.as_deref(), EVAL_DIR);
    let baseline_dir = match &opts.baseline {
        Some(p) => Some(cfg.resolve(p)),
        None => {
            let d = cfg.work_dir().join(PRETRAIN_DIR);
            (d.join(MANIFEST_FILE).exists() && d != ck).then_some(d)
        }
    };
    let (names, set) = eval_set(&dataset)?
        .ok_or_else(|| Error::Dataset(format!("no dataset at {}", dataset.display())))?;
    let feat = RandomConvFeatures::<f64>::new(cfg.metrics.clone())?;
    ensure_dir(&out)?;

    let score = |dir: &Path| -> Result<(RestorerModel, MetricsReport)> {
        let (model, man) = load_restorer(dir)?;
        let restored = model.restore(&set.lq)?;
        let m = meta(&dataset, man.tensor_sha256, man.config.clone(), cfg)?;
        Ok((model, score_images(&names, &restored, &set.gt, &feat, m)?))
    };
    let (model, report) = score(&ck)?;
    report.write(&out.join("model"))?;
    let baseline = match &baseline_dir {
        Some(d) => {
            let (m, r) = score(d)?;
            r.write(&out.join("baseline"))?;
            Some((m, r))
        }
        None => None,
    };
    let input = score_images(&names, &set.lq, &set.gt, &feat, meta(&dataset, String::new(), json!(null), cfg)?)?;
    input.write(&out.join("input"))?;

    let mut rows: Vec<(&str, &MetricsSummary)> = Vec::new();
    if let Some((_, b)) = &baseline {
        rows.push(("pre-trained", &b.summary));
    }
    rows.push(("evaluated", &report.summary));
    rows.push(("degraded input", &input.summary));
    let table = comparison_table(&rows);
    fs::write(out.join("comparison.md"), &table).ctx(|| format!("writing {}", out.display()))?;

    if opts.grid > 0 {
        let n = opts.grid.min(set.lq.len());
        let mine = model.restore(&set.lq[..n])?;
        let base = match &baseline {
            Some((m, _)) => Some(m.restore(&set.lq[..n])?),
            None => None,
        };
        let mut sheet = Vec::new();
        for i in 0..n {
            sheet.push(set.lq[i].clone());
            if let Some(b) = &base {
                sheet.push(b[i].clone());
            }
            sheet.push(mine[i].clone());
            sheet.push(set.gt[i].clone());
        }
        let cols = if base.is_some() { 4 } else { 3 };
        make_grid(&sheet, cols, 1)?.save_png(&out.join("grid.png"))?;
    }
    let outcome = EvalOutcome {
        model: report,
        baseline: baseline.map(|(_, r)| r),
        input,
        table,
    };
    RunRecord::new("evaluate", String::new(), cfg, json!({ "checkpoint": ck, "baseline": baseline_dir }))
        .write(&out)?;
    Ok(outcome)
}

// ----------------------------------------------------------------- ablate

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Low-pass factor.
    N,
    K,
    L,
    /// Number of fine-tuning pairs.
    Size,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::N => "n",
            Self::K => "k",
            Self::L => "l",
            Self::Size => "size",
        }
    }

    pub fn defaults(self, cfg: &RunConfig) -> Vec<usize> {
        match self {
            Self::N => cfg.ablation.factors.clone(),
            Self::K => cfg.ablation.ks.clone(),
            Self::L => cfg.ablation.ls.clone(),
            Self::Size => cfg.ablation.sizes.clone(),
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n" | "filter" => Ok(Self::N),
            "k" => Ok(Self::K),
            "l" => Ok(Self::L),
            "size" | "dataset-size" | "dataset_size" => Ok(Self::Size),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (n, k, l, size)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub summary: MetricsSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    /// What the sweep is compared against: pre-trained restorer outputs.
    pub reference: MetricsSummary,
    pub rows: Vec<AblationRow>,
    pub table: String,
    /// Set when the sweep does not follow the expected direction.
    pub deviation: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct AblationOpts {
    pub dataset: Option<PathBuf>,
    pub restorer: Option<PathBuf>,
    pub diffusion: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// The low-pass sweep is expected to favour N = 16 over both N = 1 and
/// N = 32 in distribution distance.
pub fn n_sweep_deviation(rows: &[AblationRow]) -> Option<String> {
    let fid = |n: usize| rows.iter().find(|r| r.value == n).and_then(|r| r.summary.fid);
    match (fid(1), fid(16), fid(32)) {
        (Some(a), Some(b), Some(c)) if b < a && b < c => None,
        (Some(a), Some(b), Some(c)) => Some(format!(
            "N=16 FID {b:.4} is not below both N=1 ({a:.4}) and N=32 ({c:.4})"
        )),
        _ => Some("sweep lacks one of N = 1, 16, 32; direction not checked".into()),
    }
}

fn size_deviation(reference: &MetricsSummary, rows: &[AblationRow]) -> Option<String> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !(r.summary.lpips < reference.lpips && r.summary.fid < reference.fid))
        .map(|r| r.value.to_string())
        .collect();
    (!bad.is_empty()).then(|| format!("sizes {} do not improve both LPIPS and FID", bad.join(", ")))
}

/// Sweeps one axis holding everything else fixed. Target-generation axes
/// score eval-split pseudo targets against ground truth; the size axis
/// fine-tunes on the first `n` pairs and scores the restorer.
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis, values: Option<&[usize]>, opts: &AblationOpts) -> Result<AblationReport> {
    cfg.validate()?;
    let values: Vec<usize> = values.map_or_else(|| axis.defaults(cfg), <[usize]>::to_vec);
    if values.is_empty() {
        return Err(Error::Config("empty ablation sweep".into()));
    }
    let dataset = or_work(cfg, opts.dataset.as_deref(), DATASET_DIR);
    let restorer = or_work(cfg, opts.restorer.as_deref(), PRETRAIN_DIR);
    let out = or_work(cfg, opts.out.as_deref(), ABLATION_DIR).join(axis.name());
    let (names, set) = eval_set(&dataset)?
        .ok_or_else(|| Error::Dataset(format!("no dataset at {}", dataset.display())))?;
    let feat = RandomConvFeatures::<f64>::new(cfg.metrics.clone())?;
    let (model, rman) = load_restorer(&restorer)?;
    let restored = model.restore(&set.lq)?;
    let reference = score_images(
        &names,
        &restored,
        &set.gt,
        &feat,
        meta(&dataset, rman.tensor_sha256.clone(), rman.config.clone(), cfg)?,
    )?;
    reference.write(&out.join("reference"))?;

    let mut rows = Vec::with_capacity(values.len());
    match axis {
        AblationAxis::Size => {
            let pairs = or_work(cfg, opts.pairs.as_deref(), PAIRS_DIR);
            for &n in &values {
                let dir = out.join(format!("{n}"));
                let ft = FinetuneOpts {
                    restorer: Some(restorer.clone()),
                    pairs: Some(pairs.clone()),
                    dataset: Some(dataset.clone()),
                    out: Some(dir.join("checkpoint")),
                    limit: Some(n),
                };
                let ck = cmd_finetune(cfg, &ft)?;
                let (m, man) = load_restorer(&ck)?;
                let outp = m.restore(&set.lq)?;
                let rep = score_images(
                    &names,
                    &outp,
                    &set.gt,
                    &feat,
                    meta(&dataset, man.tensor_sha256, man.config, cfg)?,
                )?;
                rep.write(&dir)?;
                rows.push(AblationRow { value: n, summary: rep.summary });
            }
        }
        _ => {
            let diffusion = or_work(cfg, opts.diffusion.as_deref(), DIFFUSION_DIR);
            let (den, sched_cfg, _) = load_diffusion(&diffusion)?;
            let sched = sched_cfg.build()?;
            let guides = if cfg.targets.skip_restorer { &set.lq } else { &restored };
            for &v in &values {
                let mut gen = cfg.targets.generator;
                match axis {
                    AblationAxis::N => gen.filter.factor = v,
                    AblationAxis::K => gen.k = v,
                    AblationAxis::L => gen.l = v,
                    AblationAxis::Size => unreachable!(),
                }
                gen.validate(sched.num_timesteps())?;
                let dir = out.join(format!("{v}"));
                let (targets, mapping, _) = synthesize_targets(
                    guides,
                    &names,
                    cfg.targets.sampler,
                    &gen,
                    &den,
                    &sched,
                    cfg.seed_for("targets"),
                    cfg.targets.chunk,
                )?;
                let rep = score_images(&names, &targets, &set.gt, &feat, meta(&dataset, String::new(), json!(gen), cfg)?)?;
                rep.write(&dir)?;
                write_json(&dir.join("mapping.json"), &mapping)?;
                let sheet: Vec<Image> = targets.iter().take(8).cloned().collect();
                make_grid(&sheet, 8, 1)?.save_png(&dir.join("targets.png"))?;
                info!("ablation {}={v}: fid {:?}", axis.name(), rep.summary.fid);
                rows.push(AblationRow { value: v, summary: rep.summary });
            }
        }
    }
    let labels: Vec<String> = rows.iter().map(|r| format!("{}={}", axis.name(), r.value)).collect();
    let mut entries: Vec<(&str, &MetricsSummary)> = vec![("pre-trained output", &reference.summary)];
    entries.extend(labels.iter().map(String::as_str).zip(rows.iter().map(|r| &r.summary)));
    let mut table = comparison_table(&entries);
    let deviation = match axis {
        AblationAxis::N => n_sweep_deviation(&rows),
        AblationAxis::Size => size_deviation(&reference.summary, &rows),
        _ => None,
    };
    if let Some(d) = &deviation {
        table.push_str(&format!("\nDeviation: {d}\n"));
    }
    fs::write(out.join("table.md"), &table).ctx(|| format!("writing {}", out.display()))?;
    let report = AblationReport {
        axis,
        reference: reference.summary,
        rows,
        table,
        deviation,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

// ------------------------------------------------------------ stage keys

fn key_of(v: serde_json::Value) -> String {
    hash_json(&v)
}

pub fn dataset_key(cfg: &RunConfig) -> String {
    key_of(json!({
        "stage": "dataset", "seed": cfg.seed, "size": cfg.corpus.size,
        "source_dir": cfg.paths.source_dir, "dataset": cfg.dataset,
    }))
}

pub fn diffusion_key(cfg: &RunConfig) -> String {
    key_of(json!({
        "stage": "diffusion", "seed": cfg.seed, "corpus": cfg.corpus,
        "corpus_dir": cfg.paths.corpus_dir, "diffusion": cfg.diffusion_config(),
    }))
}

pub fn pretrain_key(cfg: &RunConfig) -> String {
    key_of(json!({
        "stage": "pretrain", "seed": cfg.seed, "corpus": cfg.corpus,
        "corpus_dir": cfg.paths.corpus_dir, "train": cfg.pretrain_config(), "ranges": cfg.pretrain.ranges,
    }))
}

pub fn targets_key(cfg: &RunConfig) -> String {
    key_of(json!({
        "stage": "targets", "deps": [dataset_key(cfg), diffusion_key(cfg), pretrain_key(cfg)],
        "seed": cfg.seed, "targets": cfg.targets,
    }))
}

pub fn finetune_key(cfg: &RunConfig, limit: Option<usize>) -> String {
    key_of(json!({
        "stage": "finetune", "deps": [targets_key(cfg)], "seed": cfg.seed, "limit": limit,
        "train": cfg.finetune_config(), "real_dir": cfg.paths.real_dir, "corpus": cfg.corpus,
        "corpus_dir": cfg.paths.corpus_dir,
    }))
}

/// Whether `dir` holds a finished stage with this key.
pub fn stage_done(dir: &Path, key: &str, product: &str) -> bool {
    dir.join(product).exists() && RunRecord::load(dir).is_ok_and(|r| r.key == key)
}

pub(crate) const CHECKPOINT_PRODUCT: &str = TENSOR_FILE;
