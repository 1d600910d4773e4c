//! Run configuration and per-run reports.
//!
//! A report records everything needed to audit or reproduce one
//! synthesis: the full configuration and its hash, what each stage did,
//! and the final scores. Reports serialize to JSON; two runs of the same
//! configuration produce byte-identical reports once timings are
//! stripped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::harmony::HarmonyConfig;
use crate::inject::InjectionProbe;
use crate::noise::{BalanceConfig, LossReport};
use crate::search::SearchTrace;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot access report {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse report {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Everything one synthesis run is parameterized by. An empty `text`
/// asks for pure reconstruction of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub image: PathBuf,
    pub text: String,
    pub seed: u64,
    pub num_steps: usize,
    pub backend: String,
    pub image_model: String,
    pub joint_model: String,
    pub harmony: HarmonyConfig<f64>,
    pub balance: BalanceConfig<f64>,
    /// Skip the scale search and use this value.
    pub fixed_alpha: Option<f64>,
    /// Skip the injection-step adjustment and use this value.
    pub fixed_inject_step: Option<usize>,
    /// Probe budget for the injection adjustment; `None` means half the
    /// step count.
    pub max_adjust_iterations: Option<usize>,
    /// Extra denoiser re-evaluations per noising step.
    pub renoise_iterations: usize,
    pub out_dir: Option<PathBuf>,
    /// Stable identifier; derived from the config hash when absent.
    pub run_id: Option<String>,
    pub model_cache: Option<PathBuf>,
    pub endpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image: PathBuf::new(),
            text: String::new(),
            seed: 0,
            num_steps: 4,
            backend: "toy".into(),
            image_model: "pixel".into(),
            joint_model: "hashed-joint".into(),
            harmony: HarmonyConfig::default(),
            balance: BalanceConfig::default(),
            fixed_alpha: None,
            fixed_inject_step: None,
            max_adjust_iterations: None,
            renoise_iterations: 0,
            out_dir: None,
            run_id: None,
            model_cache: None,
            endpoint: None,
        }
    }
}

/// Hex SHA-256 of the configuration's canonical JSON form.
pub fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Identifier for a run: the explicit one when set, otherwise a prefix
/// of the config hash.
pub fn run_id_for(config: &RunConfig) -> String {
    match &config.run_id {
        Some(id) => id.clone(),
        None => format!("run-{}", &config_hash(config)[..12]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// The stage that failed and why; stages before it completed.
    Failed { stage: String, message: String },
}

/// Noise-optimization record for one sampler step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub t: usize,
    #[serde(flatten)]
    pub losses: LossReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringInfo {
    pub image_model: String,
    pub joint_model: String,
}

/// Final scores of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub alpha_star: f64,
    pub inject_step: usize,
    pub image_sim: f64,
    pub text_sim: f64,
    pub f_score: f64,
    pub b_sim: f64,
    pub aesthetic: Option<f64>,
    pub preference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub status: RunStatus,
    pub config: RunConfig,
    pub config_hash: String,
    pub result: Option<FusionOutcome>,
    pub step_losses: Vec<StepLoss>,
    pub injection_probes: Vec<InjectionProbe<f64>>,
    pub search: Option<SearchTrace<f64>>,
    pub scoring: ScoringInfo,
    pub output_image: Option<PathBuf>,
    pub wall_time_ms: u64,
    pub stage_time_ms: BTreeMap<String, u64>,
}

impl RunReport {
    /// Writes atomically: a temp file in the target directory, then a
    /// rename, so readers never see a half-written report.
    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        let to_err = |source: std::io::Error| ReportError::Io {
            path: path.display().to_string(),
            source,
        };
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, body.as_bytes()).map_err(to_err)?;
        std::fs::rename(&tmp, path).map_err(to_err)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|source| ReportError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// The report with timing fields zeroed, for byte-stable comparison
    /// of deterministic runs.
    pub fn strip_timings(&self) -> Self {
        let mut stripped = self.clone();
        stripped.wall_time_ms = 0;
        stripped.stage_time_ms = BTreeMap::new();
        stripped
    }
}

/// Collects reports under `dir`: `report.json` directly inside it, plus
/// one level of run subdirectories. Sorted by run id.
pub fn load_run_dir(dir: &Path) -> Result<Vec<RunReport>, ReportError> {
    let mut reports = Vec::new();
    let direct = dir.join("report.json");
    if direct.is_file() {
        reports.push(RunReport::load(&direct)?);
    }
    let entries = std::fs::read_dir(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| ReportError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let nested = entry.path().join("report.json");
        if nested.is_file() {
            reports.push(RunReport::load(&nested)?);
        }
    }
    reports.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn minimal_report(run_id: &str) -> RunReport {
        let config = RunConfig::default();
        RunReport {
            run_id: run_id.into(),
            status: RunStatus::Complete,
            config_hash: config_hash(&config),
            config,
            result: None,
            step_losses: Vec::new(),
            injection_probes: Vec::new(),
            search: None,
            scoring: ScoringInfo {
                image_model: "pixel".into(),
                joint_model: "hashed-joint".into(),
            },
            output_image: None,
            wall_time_ms: 42,
            stage_time_ms: BTreeMap::from([("invert".to_string(), 17)]),
        }
    }

    #[test]
    fn reports_round_trip_through_disk() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = minimal_report("run-a");
        report.save(&path).unwrap();
        let loaded = RunReport::load(&path).unwrap();
        assert_eq!(report, loaded);
        assert!(!path.with_extension("json.tmp").exists());
    }

    #[test]
    fn stripping_timings_makes_equal_runs_identical() {
        let mut fast = minimal_report("run-a");
        let mut slow = minimal_report("run-a");
        fast.wall_time_ms = 3;
        slow.wall_time_ms = 9000;
        slow.stage_time_ms.insert("synthesize".into(), 8000);
        assert_ne!(fast, slow);
        assert_eq!(fast.strip_timings(), slow.strip_timings());
    }

    #[test]
    fn the_config_hash_is_stable_and_sensitive() {
        let base = RunConfig::default();
        let again = RunConfig::default();
        assert_eq!(config_hash(&base), config_hash(&again));
        let mut changed = RunConfig::default();
        changed.seed = 1;
        assert_ne!(config_hash(&base), config_hash(&changed));
        assert_eq!(config_hash(&base).len(), 64);
    }

    #[test]
    fn run_ids_default_to_a_hash_prefix() {
        let config = RunConfig::default();
        let id = run_id_for(&config);
        assert!(id.starts_with("run-"));
        assert_eq!(id.len(), 16);
        let mut named = RunConfig::default();
        named.run_id = Some("pair-7".into());
        assert_eq!(run_id_for(&named), "pair-7");
    }

    #[test]
    fn run_directories_collect_nested_reports() {
        let dir = tempdir().unwrap();
        minimal_report("run-b")
            .save(&dir.path().join("report.json"))
            .unwrap();
        std::fs::create_dir(dir.path().join("nested")).unwrap();
        minimal_report("run-a")
            .save(&dir.path().join("nested/report.json"))
            .unwrap();
        std::fs::write(dir.path().join("notes.txt"), "not a report").unwrap();
        let reports = load_run_dir(dir.path()).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].run_id, "run-a");
        assert_eq!(reports[1].run_id, "run-b");
    }

    #[test]
    fn failed_status_serializes_with_the_stage_name() {
        let mut report = minimal_report("run-x");
        report.status = RunStatus::Failed {
            stage: "invert".into(),
            message: "boom".into(),
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"invert\""));
        assert!(json.contains("failed"));
    }
}
