//! End-to-end behavior of the synthesis pipeline on the built-in backend.

use std::path::Path;

use fusion_core::backend::DiffusionBackend;
use fusion_core::imageio::{load_image, save_image};
use fusion_core::noise::BalanceConfig;
use fusion_core::pipeline::{run_batch, BatchConfig, PerceptionCandidateScorer};
use fusion_core::report::{RunConfig, RunStatus};
use fusion_core::run_synthesis;
use fusion_core::toy::ToyBackend;
use ndarray::Array3;
use tempfile::tempdir;

fn write_test_image(path: &Path, phase: f64) {
    let image = Array3::from_shape_fn([1, 8, 8], |(_, y, x)| {
        0.5 + 0.3 * ((x as f64 + phase) / 7.0 - 0.5) + 0.15 * (y as f64 / 7.0 - 0.5)
    });
    save_image(path, &image).unwrap();
}

/// A noise budget generous enough to pin each denoising step to the
/// inversion trajectory exactly.
fn exact_balance() -> BalanceConfig<f64> {
    BalanceConfig {
        lambda: 0.0,
        step_size: 1e6,
        max_iterations: 50,
        variance_floor: 1e-12,
    }
}

#[test]
fn an_empty_text_reconstructs_the_input_image() {
    let dir = tempdir().unwrap();
    let image_path = dir.path().join("input.png");
    write_test_image(&image_path, 0.0);
    let config = RunConfig {
        image: image_path.clone(),
        text: String::new(),
        seed: 3,
        balance: exact_balance(),
        ..RunConfig::default()
    };
    let report = run_synthesis(&config);
    assert!(matches!(report.status, RunStatus::Complete), "{:?}", report.status);
    let outcome = report.result.unwrap();
    assert!(
        outcome.image_sim >= 0.95,
        "reconstruction similarity {} below 0.95",
        outcome.image_sim
    );
    // Full replay with pinned noise reproduces the input nearly exactly.
    assert!(outcome.image_sim >= 0.9999, "image_sim = {}", outcome.image_sim);
}

#[test]
fn the_default_noise_budget_still_reconstructs_well() {
    let dir = tempdir().unwrap();
    let image_path = dir.path().join("input.png");
    write_test_image(&image_path, 1.0);
    let config = RunConfig {
        image: image_path,
        text: String::new(),
        seed: 5,
        ..RunConfig::default()
    };
    let report = run_synthesis(&config);
    assert!(matches!(report.status, RunStatus::Complete));
    let outcome = report.result.unwrap();
    assert!(
        outcome.image_sim >= 0.95,
        "reconstruction similarity {} below 0.95",
        outcome.image_sim
    );
}

#[test]
fn the_fusion_branch_with_full_replay_retraces_the_inversion() {
    // With the noise pinned to the inversion trajectory and a unit scale,
    // the synthesized latent must match the encoded input to fine
    // precision, which the output image inherits.
    let dir = tempdir().unwrap();
    let image_path = dir.path().join("input.png");
    write_test_image(&image_path, 2.0);
    let out_dir = dir.path().join("runs");
    let config = RunConfig {
        image: image_path.clone(),
        text: String::new(),
        seed: 8,
        balance: exact_balance(),
        fixed_alpha: Some(1.0),
        fixed_inject_step: Some(4),
        out_dir: Some(out_dir.clone()),
        ..RunConfig::default()
    };
    let report = run_synthesis(&config);
    assert!(matches!(report.status, RunStatus::Complete));

    let backend: ToyBackend<f64> = ToyBackend::default();
    let [channels, height, width] = backend.image_shape();
    let reference = load_image::<f64>(&image_path, channels, (width, height)).unwrap();
    let produced = load_image::<f64>(
        &out_dir.join(&report.run_id).join("output.png"),
        channels,
        (width, height),
    )
    .unwrap();
    for (a, b) in reference.iter().zip(produced.iter()) {
        // One 8-bit quantization step of slack on top of the 1e-5 match.
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-5, "{a} vs {b}");
    }
}

fn write_batch_manifest(dir: &Path) -> std::path::PathBuf {
    write_test_image(&dir.join("first.png"), 0.0);
    write_test_image(&dir.join("second.png"), 3.0);
    let manifest = r#"{
        "images": [
            {"id": "first", "path": "first.png", "category": "mammals"},
            {"id": "second", "path": "second.png", "category": "objects"}
        ],
        "texts": [
            {"id": "badger", "text": "badger", "category": "mammals"},
            {"id": "harp", "text": "harp", "category": "objects"}
        ]
    }"#;
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest).unwrap();
    path
}

#[test]
fn a_toy_batch_aggregates_means_that_match_the_individual_reports() {
    let dir = tempdir().unwrap();
    let manifest = write_batch_manifest(dir.path());
    let out_dir = dir.path().join("batch");
    let batch = BatchConfig {
        manifest,
        template: RunConfig {
            seed: 21,
            out_dir: Some(out_dir.clone()),
            ..RunConfig::default()
        },
        subsample: None,
        concurrency: Some(2),
        label: "toy".into(),
        use_fusion_template: false,
    };
    let backend: ToyBackend<f64> = ToyBackend::default();
    let scorer = PerceptionCandidateScorer::from_names("pixel", "hashed-joint", 21).unwrap();
    let summary = run_batch(&batch, &backend, &scorer).unwrap();

    assert_eq!(summary.total, 4);
    assert_eq!(summary.completed, 4);
    assert_eq!(summary.failed, 0);
    let mean_f: f64 = summary.metrics.samples.iter().map(|s| s.f_score).sum::<f64>() / 4.0;
    assert!((summary.row.f_score - mean_f).abs() < 1e-12);
    let mean_img: f64 = summary.metrics.samples.iter().map(|s| s.image_sim).sum::<f64>() / 4.0;
    assert!((summary.row.image_sim - mean_img).abs() < 1e-12);

    assert!(out_dir.join("batch_summary.json").is_file());
    assert!(out_dir.join("table.txt").is_file());
    let table = std::fs::read_to_string(out_dir.join("table.txt")).unwrap();
    assert!(table.contains("toy"));
    // Every pair persisted a loadable report.
    let reports = fusion_core::report::load_run_dir(&out_dir).unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| matches!(r.status, RunStatus::Complete)));
}

#[test]
fn subsampling_is_deterministic_under_the_seed() {
    let dir = tempdir().unwrap();
    let manifest = write_batch_manifest(dir.path());
    let batch = BatchConfig {
        manifest,
        template: RunConfig {
            seed: 9,
            ..RunConfig::default()
        },
        subsample: Some(2),
        concurrency: Some(1),
        label: "sub".into(),
        use_fusion_template: false,
    };
    let backend: ToyBackend<f64> = ToyBackend::default();
    let scorer = PerceptionCandidateScorer::from_names("pixel", "hashed-joint", 9).unwrap();
    let first = run_batch(&batch, &backend, &scorer).unwrap();
    let second = run_batch(&batch, &backend, &scorer).unwrap();
    assert_eq!(first.total, 2);
    assert_eq!(first.metrics, second.metrics);
}

#[test]
fn one_corrupt_image_fails_its_pairs_and_spares_the_rest() {
    let dir = tempdir().unwrap();
    let manifest = write_batch_manifest(dir.path());
    // Corrupt one image after manifest validation has something to find.
    std::fs::write(dir.path().join("second.png"), b"not a png at all").unwrap();
    let batch = BatchConfig {
        manifest,
        template: RunConfig {
            seed: 33,
            ..RunConfig::default()
        },
        subsample: None,
        concurrency: Some(1),
        label: "partial".into(),
        use_fusion_template: false,
    };
    let backend: ToyBackend<f64> = ToyBackend::default();
    let scorer = PerceptionCandidateScorer::from_names("pixel", "hashed-joint", 33).unwrap();
    let summary = run_batch(&batch, &backend, &scorer).unwrap();
    assert_eq!(summary.total, 4);
    assert_eq!(summary.completed, 2);
    assert_eq!(summary.failed, 2);
    for failure in &summary.failures {
        assert_eq!(failure.stage, "load-image");
        assert!(failure.run_id.starts_with("second--"));
    }
}

#[test]
fn the_fusion_template_rephrases_the_prompt() {
    let dir = tempdir().unwrap();
    let manifest = write_batch_manifest(dir.path());
    let out_dir = dir.path().join("batch");
    let batch = BatchConfig {
        manifest,
        template: RunConfig {
            seed: 2,
            out_dir: Some(out_dir.clone()),
            ..RunConfig::default()
        },
        subsample: Some(1),
        concurrency: Some(1),
        label: "templated".into(),
        use_fusion_template: true,
    };
    let backend: ToyBackend<f64> = ToyBackend::default();
    let scorer = PerceptionCandidateScorer::from_names("pixel", "hashed-joint", 2).unwrap();
    let summary = run_batch(&batch, &backend, &scorer).unwrap();
    assert_eq!(summary.completed, 1);
    let reports = fusion_core::report::load_run_dir(&out_dir).unwrap();
    assert_eq!(reports.len(), 1);
    let text = &reports[0].config.text;
    assert!(text.starts_with("a photo of an "), "prompt: {text}");
    assert!(text.contains("creatively fused with a"), "prompt: {text}");
}
