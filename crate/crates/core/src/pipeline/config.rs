use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddpm::DiffusionTrainConfig;
use crate::degrade::{ClassicRanges, DegradationConfig, IsoPreset, RealisticDegradationParams};
use crate::error::{Error, IoContext, Result};
use crate::features::FeatureConfig;
use crate::guidance::{LowPassFilter, SamplerKind, TargetGenConfig};
use crate::losses::LossWeights;
use crate::restore::TrainConfig;
use crate::schedule::ScheduleConfig;

/// Environment variable naming the directory relative paths resolve
/// against.
pub const DATA_ROOT_ENV: &str = "DIFADAPT_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Base for relative paths; falls back to `$DIFADAPT_DATA`, then the
    /// working directory.
    pub data_root: Option<PathBuf>,
    /// Where every stage writes its artifacts.
    pub work_dir: PathBuf,
    /// Clean training images. When unset, a procedural face corpus is used.
    pub corpus_dir: Option<PathBuf>,
    /// Images for the discriminator's real branch during fine-tuning
    /// (defaults to the clean corpus).
    pub real_dir: Option<PathBuf>,
    /// Clean images the evaluation dataset is degraded from. When unset,
    /// procedural faces disjoint from the training corpus are used.
    pub source_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            work_dir: PathBuf::from("runs/default"),
            corpus_dir: None,
            real_dir: None,
            source_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Procedural corpus size.
    pub count: usize,
    /// Side length every image is resized (or rendered) to.
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { count: 2000, size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub fit: usize,
    pub eval: usize,
    pub degradation: DegradationConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            fit: 500,
            eval: 200,
            degradation: DegradationConfig::Realistic(RealisticDegradationParams::preset(2, IsoPreset::Moderate)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsConfig {
    pub sampler: SamplerKind,
    pub generator: TargetGenConfig,
    /// Guide the sampler with the degraded input instead of the restorer
    /// output.
    pub skip_restorer: bool,
    /// Images per sampling batch.
    pub chunk: usize,
}

impl Default for TargetsConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ours,
            generator: TargetGenConfig {
                filter: LowPassFilter::new(4).expect("valid factor"),
                ..TargetGenConfig::paper_default()
            },
            skip_restorer: false,
            chunk: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub ranges: ClassicRanges,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                iters: 3000,
                lr: 2e-4,
                weights: desk_weights(),
                ..TrainConfig::default()
            },
            ranges: ClassicRanges::default(),
        }
    }
}

/// Adversarial weight reduced for the small discriminator; see README.
fn desk_weights() -> LossWeights {
    LossWeights {
        lambda_lpips: 0.1,
        lambda_gan: 0.01,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub factors: Vec<usize>,
    pub ks: Vec<usize>,
    pub ls: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            factors: vec![1, 8, 16, 32],
            ks: vec![400, 600, 800],
            ls: vec![0, 200, 360, 500],
            sizes: vec![20, 100, 500],
        }
    }
}

/// Every setting of a run. Training-stage seeds are derived from `seed`;
/// seeds written inside the stage sections are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    /// Also fixes the noise schedule every later stage samples with.
    pub diffusion: DiffusionTrainConfig,
    pub dataset: DatasetConfig,
    pub targets: TargetsConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub metrics: FeatureConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            diffusion: DiffusionTrainConfig::default(),
            dataset: DatasetConfig::default(),
            targets: TargetsConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: TrainConfig {
                iters: 500,
                weights: desk_weights(),
                eval_every: 100,
                ..TrainConfig::default()
            },
            metrics: FeatureConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Named sub-seed of a root seed: the first 8 bytes of
/// `sha256(root_le || name)`.
pub fn stage_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub const STAGES: [&str; 7] = ["corpus", "source", "degrade", "diffusion", "pretrain", "targets", "finetune"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed_for(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }

    pub fn schedule(&self) -> ScheduleConfig {
        self.diffusion.schedule
    }

    /// Diffusion settings with the derived seed.
    pub fn diffusion_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            seed: self.seed_for("diffusion"),
            ..self.diffusion.clone()
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed_for("pretrain"),
            features: self.metrics.clone(),
            ..self.pretrain.train.clone()
        }
    }

    /// Fine-tuning settings; the restorer architecture always follows the
    /// pretraining section.
    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed_for("finetune"),
            features: self.metrics.clone(),
            restorer: self.pretrain.train.restorer.clone(),
            ..self.finetune.clone()
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.paths.work_dir)
    }

    /// Resolves `p` against the data root (absolute paths pass through).
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        let root = self
            .paths
            .data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
        match root {
            Some(r) => r.join(p),
            None => p.to_path_buf(),
        }
    }

    /// Cross-field checks; run before any command touches the disk.
    pub fn validate(&self) -> Result<()> {
        let size = self.corpus.size;
        let sched = self.schedule().build()?;
        let t = sched.num_timesteps();
        self.diffusion_config().validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        self.pretrain.ranges.validate()?;
        self.dataset.degradation.validate()?;
        let g = &self.targets.generator;
        g.validate(t)?;
        if self.targets.chunk == 0 {
            return Err(Error::Config("targets.chunk must be >= 1".into()));
        }
        if size == 0 || self.corpus.count == 0 {
            return Err(Error::Config("corpus needs size >= 1 and count >= 1".into()));
        }
        let mut multiples = vec![
            ("low-pass factor", g.filter.factor),
            ("diffusion U-Net", self.diffusion.unet.size_multiple()),
            ("restorer", 4),
            ("discriminator", 1 << self.pretrain.train.discriminator.stages),
            ("feature extractor", 1 << self.metrics.widths.len().saturating_sub(1)),
        ];
        if let DegradationConfig::Realistic(p) = &self.dataset.degradation {
            multiples.push(("realistic downsample factor", p.r));
        }
        for &n in &self.ablation.factors {
            multiples.push(("ablation low-pass factor", n));
        }
        for (what, m) in multiples {
            if m == 0 || size % m != 0 {
                return Err(Error::Config(format!("image size {size} is not divisible by the {what} ({m})")));
            }
        }
        if size < 11 {
            return Err(Error::Config("image size must be >= 11 for SSIM".into()));
        }
        if self.dataset.eval < 2 || self.dataset.fit == 0 {
            return Err(Error::Config("dataset needs >= 1 fit and >= 2 eval images".into()));
        }
        for &k in &self.ablation.ks {
            if k <= g.l || k > t {
                return Err(Error::Config(format!("ablation K={k} must satisfy L={} < K <= {t}", g.l)));
            }
        }
        for &l in &self.ablation.ls {
            if l >= g.k {
                return Err(Error::Config(format!("ablation L={l} must be < K={}", g.k)));
            }
        }
        if self.ablation.sizes.contains(&0) {
            return Err(Error::Config("ablation sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[corpus]\nsize = 64\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.corpus.size, 64);
        assert_eq!(c.corpus.count, 2000);
    }

    #[test]
    fn cross_field_violations_are_config_errors() {
        let mut c = RunConfig::default();
        c.targets.generator.l = 700;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.corpus.size = 36;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.finetune.weights.lambda_gan = -1.0;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let a: Vec<u64> = STAGES.iter().map(|s| stage_seed(0, s)).collect();
        let mut b = a.clone();
        b.dedup();
        assert_eq!(a.len(), b.len());
        assert_eq!(stage_seed(0, "corpus"), stage_seed(0, "corpus"));
        assert_ne!(stage_seed(0, "corpus"), stage_seed(1, "corpus"));
    }
}
