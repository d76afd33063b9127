//! End-to-end checks of the `emloc` binary: generate, train, evaluate,
//! infer, render, and report on a miniature dataset, plus exit-code
//! contracts.

use std::path::Path;
use std::process::{Command, Output};

fn emloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emloc"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(dir: &Path) {
    let config = r#"
[dataset]
dir = "data"
preset = "desk-freespace"
master_seed = 5
grid = 16
m = 2
n_sensors = 8
train_size = 24
val_size = 12
test_size = 12

[network]
occupancy_widths = [2, 3, 4]
single_widths = [3, 4, 5]
stage2_widths = [3, 4, 5]

[train]
method = "single_stage"
epochs = 2
batch_size = 8
seed = 3
checkpoint_dir = "runs/single"
"#;
    std::fs::write(dir.join("run.toml"), config).unwrap();
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_tiny_config(dir);

    assert_ok(&emloc(dir, &["generate"]), "generate");
    assert!(dir.join("data/manifest.json").exists());
    assert!(dir.join("data/train.bin").exists());

    // Re-running without --force is a no-op on a matching dataset.
    let again = emloc(dir, &["generate"]);
    assert_ok(&again, "generate (idempotent)");
    assert!(String::from_utf8_lossy(&again.stdout).contains("already present"));

    // With no explicit occupancy_checkpoint, the occupancy run trains into
    // the `occupancy` directory next to the configured checkpoint_dir, which
    // is where the two-stage methods load it from.
    assert_ok(&emloc(dir, &["train-occupancy"]), "train-occupancy");
    assert!(dir.join("runs/occupancy/best.ckpt").exists());

    assert_ok(&emloc(dir, &["train-localizer"]), "train-localizer single");
    assert!(dir.join("runs/single/best.ckpt").exists());
    assert!(dir.join("runs/single/training_log.json").exists());
    assert!(dir.join("runs/single/resolved.toml").exists());

    let eval = emloc(dir, &["evaluate"]);
    assert_ok(&eval, "evaluate");
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("CMR %"), "table header missing: {stdout}");
    assert!(stdout.contains("single_stage"));
    assert!(dir.join("runs/single/report.json").exists());

    // Oracle evaluation is perfect by construction.
    let oracle = emloc(dir, &["evaluate", "--oracle", "--report", "oracle.json"]);
    assert_ok(&oracle, "evaluate --oracle");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["cmr"], 1.0);
    assert_eq!(report["fa"], 0.0);
    assert_eq!(report["mr"], 0.0);

    // Inference prints exactly M slot lines.
    let infer = emloc(dir, &["infer", "--index", "0"]);
    assert_ok(&infer, "infer");
    let lines: Vec<String> = String::from_utf8_lossy(&infer.stdout)
        .lines()
        .filter(|l| l.starts_with("slot "))
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 2, "listing must have one line per slot: {lines:?}");

    // Rendering is byte-deterministic.
    assert_ok(&emloc(dir, &["render", "--index", "1", "--out", "a.png"]), "render a");
    assert_ok(&emloc(dir, &["render", "--index", "1", "--out", "b.png"]), "render b");
    let a = std::fs::read(dir.join("a.png")).unwrap();
    let b = std::fs::read(dir.join("b.png")).unwrap();
    assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(a, b);

    // Report table combines saved runs.
    let report = emloc(dir, &["report", "single=runs/single/report.json", "oracle.json"]);
    assert_ok(&report, "report");
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("single"));
    assert!(text.contains("oracle"));

    // Two-stage training finds the frozen occupancy checkpoint at the
    // default sibling location without extra flags.
    assert_ok(
        &emloc(
            dir,
            &["train-localizer", "--method", "two_stage_logit", "--checkpoint-dir", "runs/logit"],
        ),
        "train-localizer two-stage",
    );
    let eval = emloc(
        dir,
        &["evaluate", "--method", "two_stage_logit", "--checkpoint-dir", "runs/logit"],
    );
    assert_ok(&eval, "evaluate two-stage");
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_tiny_config(dir);

    // Configuration error: malformed method name.
    let out = emloc(dir, &["train-localizer", "--method", "three_stage"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Data error: evaluating before anything exists.
    let out = emloc(dir, &["evaluate"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Config error: dataset present but config asks for different settings.
    assert_ok(&emloc(dir, &["generate"]), "generate");
    let mut config = std::fs::read_to_string(dir.join("run.toml")).unwrap();
    config = config.replace("n_sensors = 8", "n_sensors = 9");
    std::fs::write(dir.join("run.toml"), config).unwrap();
    let out = emloc(dir, &["generate"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--force"), "{err}");

    // --force regenerates under the new settings.
    assert_ok(&emloc(dir, &["generate", "--force"]), "generate --force");
}
