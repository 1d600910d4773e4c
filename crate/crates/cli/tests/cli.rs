//! Black-box tests that drive the installed binary.

use std::path::Path;
use std::process::{Command, Output};

use fusion_core::imageio::save_image;
use ndarray::Array3;
use tempfile::tempdir;

fn fusion() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusion"))
}

fn write_test_image(path: &Path, phase: f64) {
    let image = Array3::from_shape_fn([1, 8, 8], |(_, y, x)| {
        0.5 + 0.3 * ((x as f64 + phase) / 7.0 - 0.5) + 0.15 * (y as f64 / 7.0 - 0.5)
    });
    save_image(path, &image).unwrap();
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Report JSON with the timing fields removed, for determinism checks.
fn stable_report(path: &Path) -> serde_json::Value {
    let mut value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let map = value.as_object_mut().unwrap();
    map.remove("wall_time_ms");
    map.remove("stage_time_ms");
    value
}

#[test]
fn synthesize_writes_artifacts_and_is_deterministic() {
    let dir = tempdir().unwrap();
    let image = dir.path().join("input.png");
    write_test_image(&image, 0.0);

    let run = || {
        fusion()
            .args(["synthesize", "--text", "pineapple", "--seed", "7"])
            .arg("--image")
            .arg(&image)
            .arg("--run-id")
            .arg("demo")
            .arg("--out")
            .arg(dir.path().join("out"))
            .output()
            .unwrap()
    };
    let first = run();
    assert!(first.status.success(), "stderr: {}", stderr_of(&first));
    let stdout = stdout_of(&first);
    assert!(stdout.contains("run demo: complete"), "stdout: {stdout}");
    assert!(stdout.contains("alpha* ="), "stdout: {stdout}");
    let report_path = dir.path().join("out/demo/report.json");
    assert!(dir.path().join("out/demo/output.png").is_file());
    assert!(dir.path().join("out/demo/trace.csv").is_file());
    let first_report = stable_report(&report_path);

    let second = run();
    assert!(second.status.success());
    assert_eq!(first_report, stable_report(&report_path));
}

#[test]
fn a_missing_image_fails_with_the_stage_named() {
    let dir = tempdir().unwrap();
    let output = fusion()
        .args(["synthesize", "--text", "owl", "--image", "nowhere.png"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = stderr_of(&output);
    assert!(stderr.contains("load-image"), "stderr: {stderr}");
}

#[test]
fn an_unknown_backend_fails_before_any_work() {
    let dir = tempdir().unwrap();
    let image = dir.path().join("input.png");
    write_test_image(&image, 1.0);
    let output = fusion()
        .args(["synthesize", "--text", "owl", "--backend", "warp"])
        .arg("--image")
        .arg(&image)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = stderr_of(&output);
    assert!(stderr.contains("config"), "stderr: {stderr}");
    assert!(stderr.contains("warp"), "stderr: {stderr}");
}

fn write_manifest(dir: &Path) -> std::path::PathBuf {
    write_test_image(&dir.join("first.png"), 0.0);
    write_test_image(&dir.join("second.png"), 3.0);
    let manifest = r#"{
        "images": [
            {"id": "first", "path": "first.png"},
            {"id": "second", "path": "second.png"}
        ],
        "texts": [
            {"id": "badger", "text": "badger"},
            {"id": "harp", "text": "harp"}
        ]
    }"#;
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest).unwrap();
    path
}

#[test]
fn batch_then_report_produces_a_comparison_table() {
    let dir = tempdir().unwrap();
    let manifest = write_manifest(dir.path());

    let batch = |label: &str, extra: &[&str]| {
        let mut cmd = fusion();
        cmd.args(["batch", "--seed", "3", "--label", label])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(dir.path().join(label))
            .args(extra);
        cmd.output().unwrap()
    };
    let adaptive = batch("adaptive", &[]);
    assert!(adaptive.status.success(), "stderr: {}", stderr_of(&adaptive));
    let stdout = stdout_of(&adaptive);
    assert!(stdout.contains("4 pairs, 4 completed, 0 failed"), "stdout: {stdout}");
    assert!(dir.path().join("adaptive/batch_summary.json").is_file());
    assert!(dir.path().join("adaptive/table.txt").is_file());

    let fixed = batch("fixed", &["--fixed-alpha", "2.0", "--fixed-i", "0"]);
    assert!(fixed.status.success(), "stderr: {}", stderr_of(&fixed));

    let table_path = dir.path().join("comparison.txt");
    let report = fusion()
        .arg("report")
        .arg("--runs")
        .arg(dir.path().join("adaptive"))
        .arg("--runs")
        .arg(dir.path().join("fixed"))
        .arg("--exact-p")
        .arg("--out")
        .arg(&table_path)
        .output()
        .unwrap();
    assert!(report.status.success(), "stderr: {}", stderr_of(&report));
    let stdout = stdout_of(&report);
    for needle in ["method", "adaptive", "fixed", "f_score: H =", "exact p ="] {
        assert!(stdout.contains(needle), "missing {needle:?} in: {stdout}");
    }
    assert_eq!(std::fs::read_to_string(&table_path).unwrap(), stdout);
}

#[test]
fn subsample_limits_the_batch() {
    let dir = tempdir().unwrap();
    let manifest = write_manifest(dir.path());
    let output = fusion()
        .args(["batch", "--seed", "5", "--subsample", "2", "--label", "sub"])
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(dir.path().join("sub"))
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    assert!(stdout_of(&output).contains("2 pairs, 2 completed"));
}

#[test]
fn a_corrupt_pair_fails_the_batch_exit_code_but_not_the_rest() {
    let dir = tempdir().unwrap();
    let manifest = write_manifest(dir.path());
    std::fs::write(dir.path().join("second.png"), b"junk").unwrap();
    let output = fusion()
        .args(["batch", "--seed", "5", "--label", "partial"])
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(dir.path().join("partial"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stdout_of(&output).contains("2 completed, 2 failed"));
    assert!(stderr_of(&output).contains("load-image"));
}
