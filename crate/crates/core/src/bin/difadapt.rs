use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use difadapt::degrade::Split;
use difadapt::guidance::SamplerKind;
use difadapt::pipeline::{
    cmd_ablate, cmd_degrade, cmd_demo, cmd_evaluate, cmd_finetune, cmd_gen_targets, cmd_pretrain,
    cmd_train_diffusion, AblationAxis, AblationOpts, DemoOpts, EvalOpts, FinetuneOpts, RunConfig, TargetOpts,
    DATA_ROOT_ENV,
};
use difadapt::{Error, Result};

/// Adapt a pre-trained image restorer to unseen degradations with
/// diffusion-generated pseudo targets.
#[derive(Parser)]
#[command(name = "difadapt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (overrides the config).
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Base for relative paths (overrides the config).
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the degraded (fit, eval) dataset.
    Degrade {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the plan without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train the diffusion prior on the clean corpus.
    TrainDiffusion {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Pre-train the restorer on classic synthetic degradations.
    PretrainRestorer {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Generate pseudo targets for degraded inputs.
    GenTargets {
        #[arg(long)]
        restorer: Option<PathBuf>,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        /// Dataset directory holding the degraded inputs.
        #[arg(long)]
        lq: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// ours, difface, ilvr or dr2.
        #[arg(long)]
        sampler: Option<SamplerKind>,
        /// Guide sampling with the degraded input itself.
        #[arg(long)]
        skip_restorer: bool,
        /// Preset for N, K, L and the respacing.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "n")]
        factor: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        l: Option<usize>,
        /// Split to process (fit or eval).
        #[arg(long, default_value = "fit", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Fine-tune the restorer on pseudo-target pairs.
    Finetune {
        #[arg(long)]
        restorer: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Images for the discriminator's real branch.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score a restorer on the eval split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rows of the input | pre-trained | evaluated | GT sheet.
        #[arg(long, default_value_t = 8)]
        grid: usize,
    },
    /// Sweep N, K, L or the fine-tuning set size.
    Ablate {
        /// n, k, l or size.
        axis: AblationAxis,
        /// Comma-separated values (defaults from the config).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline, reusing finished stages.
    Demo {
        /// Also sweep the low-pass factor.
        #[arg(long)]
        n_sweep: bool,
        /// Also fine-tune with the smaller set sizes.
        #[arg(long)]
        sizes: bool,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "fit" => Ok(Split::Fit),
        "eval" => Ok(Split::Eval),
        _ => Err(format!("unknown split `{s}` (fit, eval)")),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = &c.work_dir {
        cfg.paths.work_dir = w.clone();
    }
    if let Some(r) = &c.data_root {
        cfg.paths.data_root = Some(r.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::Degrade { out, dry_run } => {
            let (plan, manifest) = cmd_degrade(&cfg, out.as_deref(), dry_run)?;
            println!("{plan}");
            if let Some(m) = manifest {
                println!("{}", m.display());
            }
        }
        Cmd::TrainDiffusion { out, steps, resume } => {
            if let Some(s) = steps {
                cfg.diffusion.steps = s;
            }
            let dir = cmd_train_diffusion(&cfg, out.as_deref(), resume)?;
            println!("{}", dir.display());
        }
        Cmd::PretrainRestorer { out, iters } => {
            if let Some(n) = iters {
                cfg.pretrain.train.iters = n;
            }
            println!("{}", cmd_pretrain(&cfg, out.as_deref())?.display());
        }
        Cmd::GenTargets {
            restorer,
            diffusion,
            lq,
            out,
            sampler,
            skip_restorer,
            preset,
            factor,
            k,
            l,
            split,
            limit,
        } => {
            let g = &mut cfg.targets.generator;
            if let Some(p) = preset {
                *g = difadapt::guidance::TargetGenConfig::preset(&p)?;
            }
            if let Some(n) = factor {
                g.filter.factor = n;
            }
            if let Some(k) = k {
                g.k = k;
            }
            if let Some(l) = l {
                g.l = l;
            }
            if let Some(s) = sampler {
                cfg.targets.sampler = s;
            }
            cfg.targets.skip_restorer |= skip_restorer;
            let opts = TargetOpts {
                dataset: lq,
                restorer,
                diffusion,
                out,
                split: Some(split),
                limit,
            };
            let (dir, m) = cmd_gen_targets(&cfg, &opts)?;
            println!("{} pairs in {}", m.entries.len(), dir.display());
        }
        Cmd::Finetune {
            restorer,
            pairs,
            real,
            dataset,
            out,
            iters,
            limit,
        } => {
            if let Some(n) = iters {
                cfg.finetune.iters = n;
            }
            if real.is_some() {
                cfg.paths.real_dir = real;
            }
            let opts = FinetuneOpts {
                restorer,
                pairs,
                dataset,
                out,
                limit,
            };
            println!("{}", cmd_finetune(&cfg, &opts)?.display());
        }
        Cmd::Evaluate {
            checkpoint,
            baseline,
            dataset,
            out,
            grid,
        } => {
            let e = cmd_evaluate(
                &cfg,
                &EvalOpts {
                    checkpoint,
                    baseline,
                    dataset,
                    out,
                    grid,
                },
            )?;
            print!("{}", e.table);
        }
        Cmd::Ablate { axis, values, out } => {
            let opts = AblationOpts {
                out,
                ..Default::default()
            };
            let r = cmd_ablate(&cfg, axis, values.as_deref(), &opts)?;
            print!("{}", r.table);
        }
        Cmd::Demo { n_sweep, sizes } => {
            let r = cmd_demo(&cfg, DemoOpts { n_sweep, sizes })?;
            print!("{}", r.markdown());
        }
        Cmd::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
