use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lesionattn(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionattn"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(workdir: &Path, args: &[&str]) -> Value {
    let out = lesionattn(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn select_prints_knee_id() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cands.csv"),
        "id,p_pred,p_fair\nA,0.9,0.9\nB,0.8,0.95\nC,0.85,0.85\n",
    )
    .unwrap();
    let out = lesionattn(dir.path(), &["select", "--candidates", "cands.csv", "--frontier-out", "front.csv"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "A");
    assert_eq!(
        lesionattn(dir.path(), &["select", "--candidates", "cands.csv", "--policy", "max_fair"]).stdout,
        b"B\n"
    );
    let front = fs::read_to_string(dir.path().join("front.csv")).unwrap();
    assert_eq!(front.lines().count(), 4);
    assert!(front.lines().next().unwrap().contains("on_frontier"));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = lesionattn(dir.path(), &["train", "--config", "missing.file"]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("missing.file"));
}

#[test]
fn bad_config_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nno_such_key = 1\n").unwrap();
    let out = lesionattn(dir.path(), &["--config", "bad.toml", "split"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "format");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lesionattn(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(lesionattn(dir.path(), &["evaluate"]).status.code(), Some(2));
    assert_eq!(
        lesionattn(dir.path(), &["evaluate", "--run", "a", "--checkpoint", "b"]).status.code(),
        Some(2)
    );
}

#[test]
fn unknown_method_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = lesionattn(dir.path(), &["train", "--set", "method=magic"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "unknown");
}

const SMOKE_CONFIG: &str = r#"
[data]
n_samples = 200
resolution = 32
seed = 3

[split]
ratios = [0.6, 0.2, 0.2]

[train]
epochs = 2
batch_size = 16

[train.model]
input_resolution = 32
channels_per_block = [4, 8]
head_hidden_units = 8
"#;

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    fs::write(w.join("cfg.toml"), SMOKE_CONFIG).unwrap();
    let c = ["--config", "cfg.toml"];
    let with = |args: &[&str]| -> Vec<String> { c.iter().chain(args).map(|s| s.to_string()).collect() };
    let run = |args: &[&str]| {
        let v = with(args);
        ok_json(w, &v.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let g = run(&["generate"]);
    assert_eq!(g["n_samples"], 200);
    assert!(w.join("data").is_dir());

    run(&["split"]);
    assert!(w.join("split.csv").is_file());

    for method in ["baseline", "lesion_attn"] {
        let t = run(&["train", "--method", method]);
        assert_eq!(t["status"], "finished");
        assert!(w.join(format!("runs/{method}_s0/best.json")).is_file());
    }
    // A second seed so the report has intervals to compare.
    for method in ["baseline", "lesion_attn"] {
        run(&["train", "--method", method, "--seed", "1"]);
    }

    let e = run(&["evaluate", "--run", "runs/lesion_attn_s0"]);
    let eo = e["report"]["eo"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eo));
    let preds = "eval/lesion_attn_s0/test_predictions.csv";
    assert!(w.join(preds).is_file());

    // Scores must not depend on test masks.
    let dropped = run(&["evaluate", "--run", "runs/lesion_attn_s0", "--drop-masks", "--out", "eval/dropped"]);
    assert_eq!(dropped["report"], e["report"]);

    run(&["plot", "--predictions", preds]);
    assert!(w.join("plots").read_dir().unwrap().count() >= 4);

    let a = run(&["attn-audit", "--run", "runs/lesion_attn_s0"]);
    assert!(a.is_object());
    assert!(w.join("audit/lesion_attn_s0/alignment.json").is_file());

    let r = run(&["report", "--audit", "audit/lesion_attn_s0", "--plots", "plots"]);
    assert_eq!(r["out"], "report.json");
    let bundle: Value = serde_json::from_str(&fs::read_to_string(w.join("report.json")).unwrap()).unwrap();
    assert!(bundle["reports"]["baseline"].is_object());
    assert!(bundle["alignment"]["lesion_attn_s0"].is_object());
    assert!(bundle["provenance"]["generated_unix"].is_u64());
}

#[test]
fn train_resumes_after_pause() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    fs::write(w.join("cfg.toml"), SMOKE_CONFIG).unwrap();
    ok_json(w, &["--config", "cfg.toml", "generate"]);
    ok_json(w, &["--config", "cfg.toml", "split"]);
    let p = ok_json(w, &["--config", "cfg.toml", "train", "--run-id", "r", "--stop-after", "1"]);
    assert_eq!(p["status"], "paused");
    assert_eq!(p["epochs_done"], 1);
    let f = ok_json(w, &["--config", "cfg.toml", "train", "--run-id", "r"]);
    assert_eq!(f["status"], "finished");
    assert_eq!(f["epochs_run"], 2);
}
