//! Subcommands run in-process against a small generated dataset.

use std::fs;
use std::path::{Path, PathBuf};

use coatnet_cli::{run, CHECKPOINT_FILE, RUN_META, TRAIN_LOG};
use coatnet_core::synthetic::write_demo_dataset;

fn coatnet(args: &[&str]) -> i32 {
    run(std::iter::once("coatnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated dataset with splits assigned; returns the manifest path.
fn split_dataset(dir: &Path) -> PathBuf {
    write_demo_dataset(dir, 6, 32, 3).unwrap();
    let manifest = dir.join("manifest.csv");
    let code = coatnet(&["split", "--manifest", s(&manifest), "--test-per-group", "2", "--seed", "7"]);
    assert_eq!(code, 0);
    manifest
}

#[test]
fn split_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = split_dataset(dir.path());
    let first = fs::read(&manifest).unwrap();
    let meta = fs::read_to_string(dir.path().join(RUN_META)).unwrap();
    assert!(meta.contains("command=split") && meta.contains("seed=7"));
    assert_eq!(coatnet(&["split", "--manifest", s(&manifest), "--test-per-group", "2", "--seed", "7"]), 0);
    assert_eq!(fs::read(&manifest).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains(",test") && text.contains(",val") && text.contains(",train"));
}

#[test]
fn train_eval_predict_gradcam() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = split_dataset(dir.path());
    let run_dir = dir.path().join("run");
    let code = coatnet(&[
        "train", "--manifest", s(&manifest), "--out", s(&run_dir), "--epochs", "2", "--batch-size", "8", "--seed", "1",
    ]);
    assert_eq!(code, 0);
    let log = fs::read_to_string(run_dir.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    assert!(ckpt.exists());

    let eval_dir = dir.path().join("eval3");
    let code = coatnet(&[
        "eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--map3", "--plots", "--out", s(&eval_dir),
    ]);
    assert_eq!(code, 0);
    let cm = fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    let rows: Vec<&str> = cm.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 4));
    assert!(eval_dir.join("pr_curves.png").exists() && eval_dir.join("confusion.png").exists());
    let report = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("weighted,6,")));

    let image = dir.path().join("melanoma/0.png");
    let pred_dir = dir.path().join("pred");
    assert_eq!(coatnet(&["predict", "--checkpoint", s(&ckpt), "--out", s(&pred_dir), s(&image)]), 0);
    let preds = fs::read_to_string(pred_dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 2);
    assert!(preds.starts_with("image,predicted,actinic-keratosis,"));

    let cam_dir = dir.path().join("cam");
    let code = coatnet(&["gradcam", "--checkpoint", s(&ckpt), "--target", "melanoma", "--out", s(&cam_dir), s(&image)]);
    assert_eq!(code, 0);
    assert!(cam_dir.join("000_0_melanoma.png").exists());
    assert!(cam_dir.join("000_0_melanoma.csv").exists());
}

#[test]
fn augment_preview_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    write_demo_dataset(dir.path(), 1, 16, 0).unwrap();
    let image = dir.path().join("nevus/0.png");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(coatnet(&["augment-preview", "--image", s(&image), "-n", "5", "--seed", "1", "--out", s(out)]), 0);
    }
    for i in 0..5 {
        let name = format!("0_aug{i}.png");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    assert!(!a.join("0_aug5.png").exists());
    // the run-meta file alone reproduces the run
    let c = dir.path().join("c");
    let meta = a.join(RUN_META);
    assert_eq!(coatnet(&["augment-preview", "--config", s(&meta), "--out", s(&c)]), 0);
    assert_eq!(fs::read(a.join("0_aug3.png")).unwrap(), fs::read(c.join("0_aug3.png")).unwrap());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_demo_dataset(dir.path(), 1, 16, 0).unwrap();
    let image = dir.path().join("nevus/0.png");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("image={}\nn=2\nseed=4\n", image.display())).unwrap();
    let out = dir.path().join("o");
    assert_eq!(coatnet(&["augment-preview", "--config", s(&cfg), "-n", "3", "--out", s(&out)]), 0);
    assert!(out.join("0_aug2.png").exists());
    let meta = fs::read_to_string(out.join(RUN_META)).unwrap();
    assert!(meta.contains("n=3\n") && meta.contains("seed=4\n"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(coatnet(&["frobnicate"]), 1);
    assert_eq!(coatnet(&["split", "--bogus"]), 1);
    assert_eq!(coatnet(&["split", "--manifest", s(&missing)]), 1);
    assert_eq!(coatnet(&["train"]), 1);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "path,label,source,split\nx.png,freckle,consensus,train\n").unwrap();
    assert_eq!(coatnet(&["split", "--manifest", s(&bad)]), 1);

    let cfg = dir.path().join("typo.cfg");
    fs::write(&cfg, "epochz=3\n").unwrap();
    assert_eq!(coatnet(&["train", "--config", s(&cfg)]), 1);
    assert_eq!(coatnet(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write_demo_dataset(dir.path(), 1, 16, 0).unwrap();
    let broken = dir.path().join("broken.png");
    let mut bytes = fs::read(dir.path().join("nevus/0.png")).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&broken, bytes).unwrap();
    let out = dir.path().join("o");
    assert_eq!(coatnet(&["augment-preview", "--image", s(&broken), "--out", s(&out)]), 2);
}
