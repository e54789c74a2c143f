//! End-to-end runs of the compiled binary on a tiny synthetic corpus.

use misnet::datapipe::generate_blob_dataset;
use std::path::Path;
use std::process::Command;

fn misnet_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_misnet"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut rc = misnet::RunConfig::default();
    rc.model.backbone_id = "toy".to_string();
    rc.model.train_size = 32;
    rc.train.batch_size = 4;
    rc.train.base_lr = 1e-3;
    rc.augment.enabled = false;
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, rc.to_text()).unwrap();
    path
}

#[test]
fn train_eval_predict_report_pipeline() {
    let data = tempfile::tempdir().unwrap();
    // five pairs split 4/0/1, so training sees four images
    generate_blob_dataset(data.path(), 5, 40, 21).unwrap();
    let work = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(work.path());
    let run_dir = work.path().join("run");

    let out = misnet_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--data-root"])
        .arg(data.path())
        .args(["--out"])
        .arg(&run_dir)
        .args(["--epochs", "2", "--backbone", "toy"])
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    for epoch in 0..2 {
        assert!(
            log.contains(&format!("epoch={epoch} mean_total=")),
            "missing epoch {epoch} summary in:\n{log}"
        );
    }
    assert!(run_dir.join("config.txt").is_file(), "resolved config must precede compute");
    assert!(run_dir.join("latest.ckpt").is_file());
    assert!(run_dir.join("best.ckpt").is_file());

    let eval_dir = work.path().join("eval");
    let out = misnet_bin()
        .args(["eval", "--checkpoint"])
        .arg(run_dir.join("best.ckpt"))
        .args(["--data-root"])
        .arg(data.path())
        .args(["--out"])
        .arg(&eval_dir)
        .args(["--threshold-mode", "adaptive"])
        .output()
        .unwrap();
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("| Dataset | mDice | mIoU | wFm | Sm | Em | MAE |"), "{stdout}");
    assert!(stdout.contains("| MEAN |"), "{stdout}");
    assert!(eval_dir.join("report.md").is_file());

    let preds_dir = work.path().join("preds");
    let out = misnet_bin()
        .args(["predict", "--checkpoint"])
        .arg(run_dir.join("latest.ckpt"))
        .args(["--input"])
        .arg(data.path().join("images"))
        .args(["--out"])
        .arg(&preds_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "predict failed: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&preds_dir).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
    }).count(), 5);

    let combined = work.path().join("combined.md");
    let out = misnet_bin()
        .args(["report", "--inputs"])
        .arg(&eval_dir)
        .args(["--out"])
        .arg(&combined)
        .output()
        .unwrap();
    assert!(out.status.success(), "report failed: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&combined).unwrap();
    assert!(text.contains("| MEAN |"), "{text}");
}

#[test]
fn ablate_subcommand_writes_table() {
    let data = tempfile::tempdir().unwrap();
    generate_blob_dataset(data.path(), 5, 40, 23).unwrap();
    let work = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(work.path());

    let out = misnet_bin()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--data-root"])
        .arg(data.path())
        .args(["--out"])
        .arg(work.path().join("ablate"))
        .args(["--epochs", "1", "--backbone", "toy"])
        .args(["--variants", "full,wo_ssfm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "ablate failed: {}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(work.path().join("ablate/ablation.md")).unwrap();
    assert!(md.contains("| full |"), "{md}");
    assert!(md.contains("| wo_ssfm |"), "{md}");
}

#[test]
fn unknown_flags_and_bad_paths_fail_cleanly() {
    let out = misnet_bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());

    let tmp = tempfile::tempdir().unwrap();
    let out = misnet_bin()
        .args(["eval", "--checkpoint", "/nonexistent.ckpt", "--data-root"])
        .arg(tmp.path())
        .args(["--out"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:"), "{err}");
}
