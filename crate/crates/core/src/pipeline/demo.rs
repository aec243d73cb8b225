use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::commands::*;
use super::config::RunConfig;
use crate::checkpoint::{write_json, MANIFEST_FILE};
use crate::degrade::DatasetManifest;
use crate::error::{IoContext, Result};
use crate::metrics::MetricsSummary;

/// Largest tolerated PSNR loss of the fine-tuned restorer, in dB.
pub const PSNR_TOLERANCE_DB: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeResult {
    pub pairs: usize,
    pub summary: MetricsSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub work_dir: PathBuf,
    pub input: MetricsSummary,
    pub pretrained: MetricsSummary,
    pub finetuned: MetricsSummary,
    pub sizes: Vec<SizeResult>,
    pub n_sweep: Option<AblationReport>,
    pub checks: Vec<Check>,
}

impl DemoReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Adaptation demo\n\n## Eval split\n\n");
        s.push_str(&crate::metrics::comparison_table(&[
            ("pre-trained", &self.pretrained),
            ("fine-tuned", &self.finetuned),
            ("degraded input", &self.input),
        ]));
        if !self.sizes.is_empty() {
            s.push_str("\n## Fine-tuning set size\n\n");
            let labels: Vec<String> = self.sizes.iter().map(|r| format!("{} pairs", r.pairs)).collect();
            let mut rows = vec![("pre-trained", &self.pretrained)];
            rows.extend(labels.iter().map(String::as_str).zip(self.sizes.iter().map(|r| &r.summary)));
            s.push_str(&crate::metrics::comparison_table(&rows));
        }
        if let Some(n) = &self.n_sweep {
            s.push_str("\n## Low-pass factor sweep (targets vs ground truth)\n\n");
            s.push_str(&n.table);
        }
        s.push_str("\n## Checks\n\n");
        for c in &self.checks {
            let _ = writeln!(s, "- {} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DemoOpts {
    /// Also run the low-pass factor sweep.
    pub n_sweep: bool,
    /// Also fine-tune on the smaller set sizes of the size sweep.
    pub sizes: bool,
}

/// Runs every stage into the work directory, reusing any stage whose
/// recorded key matches the current configuration.
pub fn cmd_demo(cfg: &RunConfig, opts: DemoOpts) -> Result<DemoReport> {
    cfg.validate()?;
    let work = cfg.work_dir();
    fs::create_dir_all(&work).ctx(|| format!("creating {}", work.display()))?;
    fs::write(work.join("config.toml"), cfg.to_toml()).ctx(|| format!("writing {}", work.display()))?;

    let dataset = work.join(DATASET_DIR);
    if stage_done(&dataset, &dataset_key(cfg), DatasetManifest::FILE) {
        info!("dataset: cached");
    } else {
        cmd_degrade(cfg, None, false)?;
    }

    let diffusion = work.join(DIFFUSION_DIR);
    if stage_done(&diffusion, &diffusion_key(cfg), CHECKPOINT_PRODUCT) {
        info!("diffusion: cached");
    } else {
        // a compatible partial run is resumed; anything else restarts
        let resume = diffusion.join(MANIFEST_FILE).exists()
            && crate::ddpm::DiffusionTrainer::resume(cfg.diffusion_config(), &diffusion).is_ok();
        if !resume && diffusion.exists() {
            warn!("discarding stale {}", diffusion.display());
            fs::remove_dir_all(&diffusion).ctx(|| format!("removing {}", diffusion.display()))?;
        }
        cmd_train_diffusion(cfg, None, resume)?;
    }

    let pretrain = work.join(PRETRAIN_DIR);
    if stage_done(&pretrain, &pretrain_key(cfg), CHECKPOINT_PRODUCT) {
        info!("pretrain: cached");
    } else {
        cmd_pretrain(cfg, None)?;
    }

    let pairs = work.join(PAIRS_DIR);
    if stage_done(&pairs, &targets_key(cfg), MANIFEST_FILE) {
        info!("targets: cached");
    } else {
        cmd_gen_targets(cfg, &TargetOpts::default())?;
    }

    let finetune = work.join(FINETUNE_DIR);
    if stage_done(&finetune, &finetune_key(cfg, None), CHECKPOINT_PRODUCT) {
        info!("finetune: cached");
    } else {
        cmd_finetune(cfg, &FinetuneOpts::default())?;
    }

    let eval = cmd_evaluate(
        cfg,
        &EvalOpts {
            grid: 8,
            ..Default::default()
        },
    )?;
    let pretrained = eval.baseline.as_ref().expect("pre-trained checkpoint exists").summary.clone();
    let finetuned = eval.model.summary.clone();

    let mut sizes = Vec::new();
    if opts.sizes {
        for &n in &cfg.ablation.sizes {
            if n >= cfg.dataset.fit {
                sizes.push(SizeResult {
                    pairs: cfg.dataset.fit,
                    summary: finetuned.clone(),
                });
                continue;
            }
            let dir = work.join(ABLATION_DIR).join("size").join(n.to_string());
            let ck = dir.join("checkpoint");
            if !stage_done(&ck, &finetune_key(cfg, Some(n)), CHECKPOINT_PRODUCT) {
                cmd_finetune(
                    cfg,
                    &FinetuneOpts {
                        out: Some(ck.clone()),
                        limit: Some(n),
                        ..Default::default()
                    },
                )?;
            }
            let e = cmd_evaluate(
                cfg,
                &EvalOpts {
                    checkpoint: Some(ck),
                    out: Some(dir.join("eval")),
                    ..Default::default()
                },
            )?;
            sizes.push(SizeResult {
                pairs: n,
                summary: e.model.summary,
            });
        }
    }

    let n_sweep = if opts.n_sweep {
        let path = work.join(ABLATION_DIR).join("n").join("report.json");
        let key = crate::checkpoint::hash_json(&json!({
            "deps": [targets_key(cfg)], "factors": cfg.ablation.factors, "metrics": cfg.metrics,
        }));
        let key_path = work.join(ABLATION_DIR).join("n").join("key.json");
        let cached: Option<AblationReport> = match crate::checkpoint::read_json::<String>(&key_path) {
            Ok(k) if k == key => crate::checkpoint::read_json(&path).ok(),
            _ => None,
        };
        Some(match cached {
            Some(r) => r,
            None => {
                let r = cmd_ablate(cfg, AblationAxis::N, None, &AblationOpts::default())?;
                write_json(&key_path, &key)?;
                r
            }
        })
    } else {
        None
    };

    let checks = demo_checks(&pretrained, &finetuned, &sizes, n_sweep.as_ref());
    let report = DemoReport {
        work_dir: work.clone(),
        input: eval.input.summary,
        pretrained,
        finetuned,
        sizes,
        n_sweep,
        checks,
    };
    write_json(&work.join("report.json"), &report)?;
    fs::write(work.join("report.md"), report.markdown()).ctx(|| format!("writing {}", work.display()))?;
    Ok(report)
}

fn improves(base: &MetricsSummary, new: &MetricsSummary) -> (bool, String) {
    let fid_ok = matches!((base.fid, new.fid), (Some(b), Some(n)) if n < b);
    let lpips_ok = new.lpips < base.lpips;
    (
        fid_ok && lpips_ok,
        format!(
            "FID {:.4} -> {:.4}, LPIPS {:.4} -> {:.4}, PSNR {:.3} -> {:.3} dB",
            base.fid.unwrap_or(f64::NAN),
            new.fid.unwrap_or(f64::NAN),
            base.lpips,
            new.lpips,
            base.psnr,
            new.psnr
        ),
    )
}

pub fn demo_checks(
    pre: &MetricsSummary,
    post: &MetricsSummary,
    sizes: &[SizeResult],
    n_sweep: Option<&AblationReport>,
) -> Vec<Check> {
    let mut checks = Vec::new();
    let (ok, detail) = improves(pre, post);
    checks.push(Check {
        name: "finetune improves FID and LPIPS".into(),
        pass: ok,
        detail,
    });
    let drop = pre.psnr - post.psnr;
    checks.push(Check {
        name: "finetune keeps PSNR".into(),
        pass: drop <= PSNR_TOLERANCE_DB,
        detail: format!("PSNR change {:+.3} dB (limit -{PSNR_TOLERANCE_DB})", -drop),
    });
    for s in sizes {
        let (ok, detail) = improves(pre, &s.summary);
        checks.push(Check {
            name: format!("{} pairs improve FID and LPIPS", s.pairs),
            pass: ok,
            detail,
        });
    }
    if let Some(r) = n_sweep {
        checks.push(Check {
            name: "N=16 targets beat N=1 and N=32 in FID".into(),
            pass: r.deviation.is_none(),
            detail: r.deviation.clone().unwrap_or_else(|| "as expected".into()),
        });
    }
    checks
}
