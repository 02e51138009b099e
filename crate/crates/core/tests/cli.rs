//! End-to-end runs of the `seglab` binary.

use std::path::Path;
use std::process::{Command, Output};

fn seglab(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seglab"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "# tiny run\n\
         synth.n_users = 60\n\
         synth.n_videos = 200\n\
         synth.interactions_per_user = 20\n\
         train.max_epochs = 2\n\
         rec.max_epochs = 2\n",
    )
    .unwrap();
    path
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

#[test]
fn synth_train_eval_heatmap_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("interest.ckpt");
    let d = data.to_str().unwrap();
    let c = ckpt.to_str().unwrap();

    let synth = ok(&seglab(&["synth", "--out", d], Some(&cfg)));
    assert_eq!(value(&synth, "interactions"), "1200");

    let train = ok(&seglab(&["train-interest", "--data", d, "--out", c], Some(&cfg)));
    assert_eq!(value(&train, "epochs"), "2");
    assert!(ckpt.exists());
    assert!(dir.path().join("interest.ckpt.history.log").exists());
    assert!(dir.path().join("interest.ckpt.report.json").exists());

    let eval = ok(&seglab(&["eval-skip", "--target", c, "--data", d, "--slice", "cold"], Some(&cfg)));
    assert_eq!(value(&eval, "slice"), "cold");
    assert!(data.join("eval_skip_report.json").exists());

    let log = std::fs::read_to_string(data.join("interactions.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    let heat = ok(&seglab(
        &["predict-heatmap", "--checkpoint", c, "--user", row[0], "--video", row[1], "--data", d],
        Some(&cfg),
    ));
    let json: serde_json::Value = serde_json::from_str(heat.trim()).unwrap();
    let n = json["n"].as_u64().unwrap() as usize;
    let norm: Vec<f64> = json["p_normalized"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(norm.len(), n);
    assert!((norm.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let rec = dir.path().join("rec.ckpt");
    let r = rec.to_str().unwrap();
    ok(&seglab(&["train-rec", "--interest", "oracle", "--data", d, "--out", r, "--mode", "segsum"], Some(&cfg)));
    let eval_rec = ok(&seglab(&["eval-rec", "--interest", "oracle", "--checkpoint", r, "--data", d], Some(&cfg)));
    assert_eq!(value(&eval_rec, "mode"), "segsum");
    let wrong = seglab(
        &["eval-rec", "--interest", "oracle", "--checkpoint", r, "--data", d, "--mode", "segrec"],
        Some(&cfg),
    );
    assert!(!wrong.status.success());
}

#[test]
fn random_baseline_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    ok(&seglab(&["synth", "--out", d], Some(&cfg)));
    let a = ok(&seglab(&["eval-skip", "--target", "random", "--data", d], Some(&cfg)));
    let b = ok(&seglab(&["eval-skip", "--target", "random", "--data", d], Some(&cfg)));
    assert_eq!(a, b);
    assert!(value(&a, "config_hash").len() == 64);
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "train.learning_rat = 0.1\n").unwrap();
    let out = seglab(&["synth", "--out", dir.path().join("d").to_str().unwrap()], Some(&bad));
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("train.learning_rat"), "{err}");

    let missing = seglab(&["eval-skip", "--target", "random", "--data", "/nonexistent/seglab"], None);
    assert!(!missing.status.success());
    assert!(String::from_utf8(missing.stderr).unwrap().contains("/nonexistent/seglab"));
}

#[test]
fn config_reference_lists_every_key() {
    let out = ok(&seglab(&["config-reference"], None));
    for key in ["seed", "train.learning_rate", "loss.pair_mode", "synth.hazard_base", "rec.mode"] {
        assert!(out.contains(key), "{key} missing");
    }
}
