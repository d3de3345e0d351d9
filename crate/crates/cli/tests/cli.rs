use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_segrenorm"));
    cmd.current_dir(dir).env_remove("SEGRENORM_SEED").env("RUST_LOG", "error").args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn segrenorm")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single `ERROR` line.
fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run(dir, args, &[]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let errors: Vec<&str> = stderr.lines().filter(|l| l.starts_with("ERROR ")).collect();
    assert_eq!(errors.len(), 1, "expected one ERROR line, got: {stderr}");
    (out.status.code().unwrap(), errors[0].to_string())
}

fn synth(dir: &Path, n: usize) {
    std::fs::write(
        dir.join("spec.json"),
        format!(r#"{{ "image_size": 48, "n_samples": {n}, "test_fraction": 0.5 }}"#),
    )
    .unwrap();
    ok(dir, &["synth", "--spec", "spec.json", "--out", "data"]);
}

const X: &str = "data/source/manifest.json";
const Y: &str = "data/target/manifest.json";

fn tiny_config(dir: &Path, extra: &str) {
    std::fs::write(
        dir.join("c.cfg"),
        format!("iterations = 1\ncrop_size = 40\nbase_width = 4\nembed_dim = 8\n{extra}"),
    )
    .unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    let help = ok(d.path(), &["--help"]);
    for sub in ["synth", "train", "harmonize", "evaluate", "sensitivity", "train-extractor", "train-segmentor"] {
        assert!(help.contains(sub), "help lacks {sub}");
    }
    assert!(ok(d.path(), &["--version"]).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let (code, msg) = fails(d.path(), &["no-such-command"]);
    assert_eq!(code, 1);
    assert!(msg.starts_with("ERROR 1: "));
    let (code, _) = fails(d.path(), &["train", "--config", "c.cfg"]);
    assert_eq!(code, 1);
}

#[test]
fn synth_is_deterministic_and_handles_empty() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), 4);
    let m = std::fs::read_to_string(d.path().join(X)).unwrap();
    assert!(m.contains("\"split\": \"test\""));
    let first = std::fs::read(d.path().join("data/target/images/p00000.png")).unwrap();
    ok(d.path(), &["synth", "--spec", "spec.json", "--out", "again"]);
    assert_eq!(first, std::fs::read(d.path().join("again/target/images/p00000.png")).unwrap());

    let e = tempfile::tempdir().unwrap();
    synth(e.path(), 0);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(e.path().join(X)).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 0);
}

#[test]
fn seed_env_overrides_spec_seed() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), 2);
    let out = run(d.path(), &["synth", "--spec", "spec.json", "--out", "seeded"], &[("SEGRENORM_SEED", "77")]);
    assert!(out.status.success());
    let spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("seeded/phantom_spec.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 77);
    let bad = run(d.path(), &["synth", "--out", "x"], &[("SEGRENORM_SEED", "abc")]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bad_spec_and_config_are_reported() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), r#"{ "image_size": 30 }"#).unwrap();
    let (code, msg) = fails(d.path(), &["synth", "--spec", "bad.json", "--out", "o"]);
    assert_eq!(code, 1);
    assert!(msg.contains("image_size"));

    synth(d.path(), 2);
    std::fs::write(d.path().join("c.cfg"), "crop_size = 40\n").unwrap();
    let (code, msg) = fails(d.path(), &["train", "--config", "c.cfg", "--data-x", X, "--data-y", Y, "--out", "r"]);
    assert_eq!(code, 1);
    assert!(msg.contains("iterations"));
    std::fs::write(d.path().join("c.cfg"), "iterations = 1\nbogus_key = 3\n").unwrap();
    let (code, msg) = fails(d.path(), &["train", "--config", "c.cfg", "--data-x", X, "--data-y", Y, "--out", "r"]);
    assert_eq!(code, 1);
    assert!(msg.contains("bogus_key"));
}

#[test]
fn train_writes_artifacts_and_header() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), 2);
    tiny_config(d.path(), "preset = msseg\nbatch_size = 1\n");
    let stdout = ok(d.path(), &["train", "--config", "c.cfg", "--data-x", X, "--data-y", Y, "--out", "run"]);
    assert!(stdout.contains("class_weights=0.2,0.8"), "{stdout}");
    assert!(stdout.contains("batch_size=1"));
    for f in ["losses.csv", "final.srnm", "config.txt"] {
        assert!(d.path().join("run").join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(d.path().join("run/losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn train_requires_masks() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), 2);
    tiny_config(d.path(), "");
    ok(d.path(), &["train", "--config", "c.cfg", "--data-x", X, "--data-y", Y, "--out", "run"]);
    ok(d.path(), &["harmonize", "--checkpoint", "run/final.srnm", "--in", X, "--out", "harm"]);
    // Harmonized output carries no masks and cannot be used for training.
    let (code, msg) = fails(
        d.path(),
        &["train", "--config", "c.cfg", "--data-x", "harm/manifest.json", "--data-y", Y, "--out", "r2"],
    );
    assert_eq!(code, 1);
    assert!(msg.contains("mask"));
}

#[test]
fn harmonize_evaluate_and_sensitivity() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), 4);
    tiny_config(d.path(), "");
    ok(d.path(), &["train", "--config", "c.cfg", "--data-x", X, "--data-y", Y, "--out", "run"]);
    ok(d.path(), &["harmonize", "--checkpoint", "run/final.srnm", "--in", X, "--out", "harm", "--split", "test"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("harm/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["domain"], "target");
    assert_eq!(m["samples"].as_array().unwrap().len(), 2);
    assert!(d.path().join("harm/conditioning/p00002.png").exists());

    let (code, _) = fails(
        d.path(),
        &["harmonize", "--checkpoint", "run/final.srnm", "--in", X, "--out", "h2", "--direction", "sideways"],
    );
    assert_eq!(code, 1);

    ok(
        d.path(),
        &[
            "train-extractor", "--data-x", X, "--data-y", Y, "--out", "ext", "--width", "4", "--levels", "2",
            "--constant-epochs", "0", "--decay-epochs", "0",
        ],
    );
    ok(d.path(), &["train-segmentor", "--data", Y, "--out", "seg", "--width", "4", "--epochs", "0"]);
    assert!(d.path().join("seg/segmentor_eval.json").exists());

    // Harmonized = target: the harmonized row must equal a target-vs-target row.
    ok(
        d.path(),
        &[
            "evaluate", "--extractor", "ext/extractor.srnm", "--source", X, "--target", Y, "--harmonized", Y,
            "--kid-subsets", "3", "--out", "same",
        ],
    );
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("same/report.json")).unwrap()).unwrap();
    let rows = r["rows"].as_array().unwrap();
    let harm = rows.iter().find(|row| row["pair"] == "harmonized,target").unwrap();
    assert!(harm["fid"].as_f64().unwrap().abs() < 1e-6);
    assert!(r["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("segmentor")));

    ok(
        d.path(),
        &[
            "evaluate", "--extractor", "ext/extractor.srnm", "--checkpoint", "run/final.srnm", "--source", X,
            "--target", Y, "--segmentor", "seg/segmentor.srnm", "--split", "test", "--kid-subsets", "3", "--out",
            "eval",
        ],
    );
    let csv = std::fs::read_to_string(d.path().join("eval/report.csv")).unwrap();
    assert!(csv.starts_with("pair,kid_mean,kid_std,fid,dice_0,dice_1,iou_0,iou_1,gdc\n"), "{csv}");

    ok(
        d.path(),
        &["sensitivity", "--checkpoint", "run/final.srnm", "--in", X, "--sigmas", "0", "--limit", "1", "--out", "sens"],
    );
    let csv = std::fs::read_to_string(d.path().join("sens/sensitivity.csv")).unwrap();
    assert_eq!(csv, "sigma,s_mse,s_ssim\n0,0,1\n");
    assert!(std::fs::read_to_string(d.path().join("sens/s_mse.svg")).unwrap().contains("<svg"));
    let (code, _) = fails(
        d.path(),
        &["sensitivity", "--checkpoint", "run/final.srnm", "--in", X, "--sigmas", "-1", "--out", "s2"],
    );
    assert_eq!(code, 1);
}

#[test]
fn corrupt_checkpoint_is_a_user_error() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), 2);
    std::fs::write(d.path().join("junk.srnm"), b"not a checkpoint").unwrap();
    let (code, msg) = fails(d.path(), &["harmonize", "--checkpoint", "junk.srnm", "--in", X, "--out", "h"]);
    assert_eq!(code, 1);
    assert!(msg.starts_with("ERROR 1: "));
}
