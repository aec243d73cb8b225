use std::path::Path;
use std::process::Command;

use difadapt::checkpoint::{hash_file, read_json, CheckpointManifest, MANIFEST_FILE, TENSOR_FILE};
use difadapt::degrade::{DatasetManifest, Split};
use difadapt::pipeline::*;
use difadapt::Image;

fn tiny(work: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
        seed = 11
        [corpus]
        count = 24
        size = 16
        [diffusion]
        steps = 20
        batch = 4
        checkpoint_every = 10
        sample_every = 0
        [diffusion.unet]
        image_channels = 3
        base_channels = 8
        channel_mults = [1, 2]
        groups = 4
        [dataset]
        fit = 6
        eval = 4
        [targets.generator]
        k = 600
        l = 360
        respaced_steps = 20
        filter = { factor = 4, down = "block_average", up = "nearest" }
        [pretrain.train]
        iters = 4
        batch = 2
        [pretrain.train.restorer]
        width = 8
        [pretrain.train.discriminator]
        width = 4
        stages = 2
        [finetune]
        iters = 3
        batch = 2
        [metrics]
        widths = [4, 8]
        [ablation]
        factors = [1, 4]
        sizes = [6]
        ks = [700]
        ls = [100]
        "#,
    )
    .unwrap();
    cfg.paths.work_dir = work.to_path_buf();
    cfg
}

fn prepare(cfg: &RunConfig) {
    cmd_degrade(cfg, None, false).unwrap();
    cmd_train_diffusion(cfg, None, false).unwrap();
    cmd_pretrain(cfg, None).unwrap();
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_difadapt"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn cli_exit_codes_and_dry_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    let mut cfg = tiny(&tmp.path().join("work"));
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();

    let out = bin().args(["degrade", "--dry-run", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("eval split: 4"));
    assert!(!tmp.path().join("work").exists());

    cfg.targets.generator.l = 700;
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, cfg.to_toml()).unwrap();
    let out = bin().args(["degrade", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("L < K"));
    assert!(!tmp.path().join("work").exists());

    // no dataset yet: a data error
    let out = bin().args(["evaluate", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = bin().args(["degrade", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let printed = String::from_utf8_lossy(&out.stdout);
    assert!(printed.trim_end().ends_with("manifest.json"));
    let m = DatasetManifest::load(&tmp.path().join("work").join(DATASET_DIR)).unwrap();
    assert_eq!((m.fit.len(), m.eval.len()), (6, 4));

    // flags win over the file
    let out = bin()
        .args(["config", "--seed", "99", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    let shown = RunConfig::from_toml(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(shown.seed, 99);
}

#[test]
fn identity_targets_reproduce_restorer_outputs_and_pair_every_input() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    prepare(&cfg);
    cfg.targets.generator.filter.factor = 1;
    cfg.targets.generator.l = 0;
    let (dir, m) = cmd_gen_targets(&cfg, &TargetOpts::default()).unwrap();
    let dataset = DatasetManifest::load(&tmp.path().join(DATASET_DIR)).unwrap();
    let names: Vec<&str> = m.entries.iter().map(|e| e.name.as_str()).collect();
    let expected: Vec<&str> = dataset.entries(Split::Fit).iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, expected);
    for e in &m.entries {
        assert_eq!(e.guide_sha256, e.target_sha256, "{}", e.name);
        let a = std::fs::read(dir.join("restored").join(&e.name)).unwrap();
        let b = std::fs::read(dir.join("targets").join(&e.name)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(m.mapping.constrained_steps + m.mapping.tail_steps, m.mapping.k_step);
}

#[test]
fn skip_restorer_guides_with_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    prepare(&cfg);
    cfg.targets.skip_restorer = true;
    cfg.targets.generator.filter.factor = 1;
    cfg.targets.generator.l = 0;
    let (dir, m) = cmd_gen_targets(&cfg, &TargetOpts::default()).unwrap();
    assert!(m.restorer_sha256.is_none());
    assert!(!dir.join("restored").exists());
    for e in &m.entries {
        assert_eq!(e.lq_sha256, e.target_sha256);
    }
}

#[test]
fn single_point_size_sweep_equals_plain_finetune() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    prepare(&cfg);
    cmd_gen_targets(&cfg, &TargetOpts::default()).unwrap();
    let plain = cmd_finetune(&cfg, &FinetuneOpts::default()).unwrap();
    let report = cmd_ablate(&cfg, AblationAxis::Size, Some(&[6]), &AblationOpts::default()).unwrap();
    let swept = tmp.path().join(ABLATION_DIR).join("size").join("6").join("checkpoint");
    assert_eq!(
        hash_file(&plain.join(TENSOR_FILE)).unwrap(),
        hash_file(&swept.join(TENSOR_FILE)).unwrap()
    );
    let direct = cmd_evaluate(&cfg, &EvalOpts::default()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].summary, direct.model.summary);
    assert_eq!(report.reference, direct.baseline.unwrap().summary);
}

#[test]
fn target_sweeps_emit_one_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    prepare(&cfg);
    let r = cmd_ablate(&cfg, AblationAxis::N, None, &AblationOpts::default()).unwrap();
    assert_eq!(r.rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1, 4]);
    assert_eq!(r.table.lines().filter(|l| l.starts_with("| n=")).count(), 2);
    assert!(r.deviation.is_some(), "N=16/32 absent, so the direction is unchecked");
    let bad = cmd_ablate(&cfg, AblationAxis::L, Some(&[650]), &AblationOpts::default());
    assert!(matches!(bad, Err(difadapt::Error::Config(_))));
}

#[test]
fn diffusion_resume_continues_the_step_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.diffusion.steps = 10;
    let dir = cmd_train_diffusion(&cfg, None, false).unwrap();
    cfg.diffusion.steps = 20;
    cmd_train_diffusion(&cfg, None, true).unwrap();
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.iteration, 20);

    let other = tempfile::tempdir().unwrap();
    let fresh = cmd_train_diffusion(&tiny(other.path()), None, false).unwrap();
    assert_eq!(
        hash_file(&dir.join(TENSOR_FILE)).unwrap(),
        hash_file(&fresh.join(TENSOR_FILE)).unwrap()
    );
}

#[test]
fn evaluation_writes_reports_and_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    prepare(&cfg);
    cmd_gen_targets(&cfg, &TargetOpts::default()).unwrap();
    cmd_finetune(&cfg, &FinetuneOpts::default()).unwrap();
    let e = cmd_evaluate(
        &cfg,
        &EvalOpts {
            grid: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let out = tmp.path().join(EVAL_DIR);
    for f in ["model/metrics.csv", "model/summary.json", "baseline/summary.json", "comparison.md", "run.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let grid = Image::load_png(&out.join("grid.png")).unwrap();
    assert_eq!(grid.width(), 4 * 16 + 5);
    assert_eq!(grid.height(), 3 * 16 + 4);
    assert_eq!(e.model.rows.len(), 4);
    assert!(e.table.contains("pre-trained"));
    let again = cmd_evaluate(&cfg, &EvalOpts::default()).unwrap();
    assert_eq!(again.model, e.model);
}

#[test]
fn demo_reuses_finished_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let first = cmd_demo(&cfg, DemoOpts::default()).unwrap();
    let ck = tmp.path().join(FINETUNE_DIR).join(TENSOR_FILE);
    let stamp = std::fs::metadata(&ck).unwrap().modified().unwrap();
    let second = cmd_demo(&cfg, DemoOpts::default()).unwrap();
    assert_eq!(std::fs::metadata(&ck).unwrap().modified().unwrap(), stamp);
    assert_eq!(first, second);
    assert!(tmp.path().join("report.md").exists());
}
