use std::fs;
use std::path::Path;
use std::process::Command;

use hba_cli::{cmd_ablate, cmd_evaluate, cmd_synth, cmd_train, EvaluateArgs, RunConfig, SplitMode, SynthArgs};
use hba_core::metrics::Basis;
use hba_core::model::{NetworkConfig, Variant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hba-unet"))
}

fn synth(dir: &Path, count: usize, size: usize) {
    cmd_synth(&SynthArgs { out: dir, count, size, disease_level: 0.5, seed: 1 }, &mut std::io::sink()).unwrap();
}

/// Narrow 64² network that trains in well under a second per epoch.
fn small_run(dataset: &Path, out: &Path) -> RunConfig {
    let mut run = RunConfig::default();
    run.network = NetworkConfig {
        levels: 2,
        base_channels: 4,
        attention_grid: 4,
        attention_channels: 8,
        attention_heads: 2,
        input_size: 64,
        ..NetworkConfig::toy(Variant::HbaAll)
    };
    run.dataset = Some(dataset.to_path_buf());
    run.out = out.to_path_buf();
    run.train.batch_size = 4;
    run.train.max_epochs = 3;
    run
}

#[test]
fn missing_dataset_fails_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--out"])
        .arg(tmp.path().join("run"))
        .args(["--set", "dataset=/no/such/fundus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/fundus"), "{err}");
}

#[test]
fn unknown_gradcheck_scope_is_a_usage_error() {
    let out = bin().args(["gradcheck", "everything"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("everything"));
}

#[test]
fn gradcheck_ops_scope_passes() {
    let out = bin().args(["gradcheck", "ops"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 60 && text.lines().all(|l| l.ends_with(" ok")), "{text}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "levels = 3\nlearning_rate = 0.1\n").unwrap();
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_writes_the_run_layout_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 6, 96);
    let mut run = small_run(&data, &tmp.path().join("a"));
    run.reproducible = true;
    let summary = cmd_train(&run, false, &mut std::io::sink()).unwrap();
    assert_eq!(summary.history.len(), 3);
    let root = tmp.path().join("a");
    for f in ["config.resolved", "history.csv", "checkpoints/best.ckpt", "checkpoints/last.ckpt", "checkpoints/state.bin", "eval/test.csv"] {
        assert!(root.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(root.join("history.csv")).unwrap().lines().count(), 4);
    // The resolved file alone recreates the run.
    let mut again = RunConfig::load(&root.join("config.resolved")).unwrap();
    assert_eq!(again, run);
    again.out = tmp.path().join("b");
    cmd_train(&again, false, &mut std::io::sink()).unwrap();
    for f in ["history.csv", "checkpoints/best.ckpt", "checkpoints/last.ckpt"] {
        assert_eq!(fs::read(root.join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn toy_run_on_synthetic_data_writes_one_history_row_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 8, 128);
    let out = bin()
        .args(["train", "--set", "preset=toy", "--set", "max_epochs=20", "--set", "early_stop_patience=100", "--out"])
        .arg(tmp.path().join("run"))
        .arg("--set")
        .arg(format!("dataset={}", data.display()))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read_to_string(tmp.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 21);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch   20/20"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 6, 96);
    let full = small_run(&data, &tmp.path().join("full"));
    cmd_train(&full, false, &mut std::io::sink()).unwrap();
    let mut part = small_run(&data, &tmp.path().join("part"));
    part.train.max_epochs = 1;
    cmd_train(&part, false, &mut std::io::sink()).unwrap();
    part.train.max_epochs = 3;
    cmd_train(&part, true, &mut std::io::sink()).unwrap();
    let read = |d: &str| fs::read(tmp.path().join(d).join("history.csv")).unwrap();
    assert_eq!(read("full"), read("part"));
}

#[test]
fn ablate_count_only_lists_the_ladder() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["ablate", "--count-only", "--out"]).arg(tmp.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["unet", "unet+resnet", "unet+resnet+selfatt", "hba1", "hba-all"]);
    let params: Vec<usize> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]), "{params:?}");
}

#[test]
fn ablation_failure_is_reported_and_other_variants_still_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 64);
    let mut run = small_run(&data, &tmp.path().join("abl"));
    run.split = SplitMode::All;
    run.train.max_epochs = 1;
    // A 16² center map cannot be tiled by a 5×5 attention grid; plain U-Nets do not care.
    run.network = run.network.with_variant(Variant::Unet);
    run.network.attention_grid = 5;
    let rows = cmd_ablate(&run, false, &mut std::io::sink()).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows[..2] {
        assert!(r.error.is_none() && r.params.is_some(), "{r:?}");
        assert!(r.od_dc.is_some());
    }
    for r in &rows[2..] {
        assert!(r.error.as_deref().unwrap().contains("attention grid"), "{r:?}");
        assert!(r.params.is_none());
    }
    let csv = fs::read_to_string(tmp.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().last().unwrap().starts_with("hba-all,,"));
}

#[test]
fn predict_writes_one_mask_and_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 6, 96);
    let mut run = small_run(&data, &tmp.path().join("run"));
    run.train.max_epochs = 1;
    cmd_train(&run, false, &mut std::io::sink()).unwrap();
    let out = bin()
        .arg("predict")
        .arg("--checkpoint")
        .arg(tmp.path().join("run/checkpoints/best.ckpt"))
        .arg("--out")
        .arg(tmp.path().join("pred"))
        .arg(data.join("images/synth_0002.png"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("pred/predictions");
    let mask = image::open(dir.join("synth_0002.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (96, 96));
    let csv = fs::read_to_string(dir.join("coordinates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("synth_0002,"));
}

#[test]
fn evaluate_rejects_a_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 64);
    let mut run = small_run(&data, &tmp.path().join("run"));
    run.train.max_epochs = 1;
    run.split = SplitMode::All;
    cmd_train(&run, false, &mut std::io::sink()).unwrap();
    let other = tmp.path().join("other.cfg");
    let mut changed = run.clone();
    changed.network.attention_heads = 4;
    fs::write(&other, changed.to_text()).unwrap();
    let out = bin()
        .arg("evaluate")
        .arg("--checkpoint")
        .arg(tmp.path().join("run/checkpoints/best.ckpt"))
        .arg("--dataset")
        .arg(&data)
        .arg("--config")
        .arg(&other)
        .arg("--out")
        .arg(tmp.path().join("ev"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("attention_heads"));
}

#[test]
fn evaluate_without_disc_annotations_reports_fovea_only() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 64);
    let mut run = small_run(&data, &tmp.path().join("run"));
    run.train.max_epochs = 1;
    run.split = SplitMode::All;
    cmd_train(&run, false, &mut std::io::sink()).unwrap();
    fs::remove_dir_all(data.join("od_masks")).unwrap();
    fs::remove_file(data.join("od.csv")).unwrap();
    let ckpt = tmp.path().join("run/checkpoints/best.ckpt");
    let ev = tmp.path().join("ev");
    let args = EvaluateArgs {
        checkpoint: &ckpt,
        dataset: &data,
        expected: None,
        fovea_radius: None,
        basis: Basis::Original,
        overlay: true,
        out: &ev,
    };
    let report = cmd_evaluate(&args, &mut std::io::sink()).unwrap();
    assert!(!report.has_od);
    let csv = fs::read_to_string(ev.join("eval/report.csv")).unwrap();
    assert!(csv.starts_with("id,fovea_ed\n"));
    assert_eq!(fs::read_dir(ev.join("eval/overlays")).unwrap().count(), 3);
}

#[test]
fn overfit_checkpoint_segments_its_training_image() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 1, 64);
    let mut run = small_run(&data, &tmp.path().join("run"));
    run.split = SplitMode::All;
    run.train.augment = false;
    run.train.batch_size = 1;
    run.train.max_epochs = 300;
    run.train.lr_start = 0.01;
    cmd_train(&run, false, &mut std::io::sink()).unwrap();
    let ckpt = tmp.path().join("run/checkpoints/best.ckpt");
    let ev = tmp.path().join("ev");
    let args = EvaluateArgs {
        checkpoint: &ckpt,
        dataset: &data,
        expected: Some(&run.network),
        fovea_radius: None,
        basis: Basis::Resized,
        overlay: false,
        out: &ev,
    };
    let report = cmd_evaluate(&args, &mut std::io::sink()).unwrap();
    let dc = report.od_dc.mean.unwrap();
    assert!(dc >= 0.99, "{dc}");
}
