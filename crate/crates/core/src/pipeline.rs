//! End-to-end synthesis runs and batch execution.
//!
//! One run walks fixed stages: load and encode the image, invert it,
//! re-balance the per-step noise, pick the injection depth, search the
//! cross-attention scale, synthesize, score, persist. A failure in any
//! stage produces a report naming that stage with everything earlier
//! stages recorded; it never unwinds the process.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionCache;
use crate::backend::{resolve_backend, AttentionRouter, DiffusionBackend};
use crate::engine::{invert, synthesize_with_params, FusionParams};
use crate::harmony::{balance_bsim, score_f, SimilarityPair};
use crate::imageio::{load_image, save_image};
use crate::inject::adjust_injection_step;
use crate::latent::LatentCode;
use crate::manifest::{load_manifest, ManifestError};
use crate::noise::optimize_noise;
use crate::perception::{PerceptionError, PerceptionScorer};
use crate::report::{
    config_hash, run_id_for, FusionOutcome, RunConfig, RunReport, RunStatus, ScoringInfo,
    StepLoss,
};
use crate::search::golden_section_search;
use crate::stats::{summarize_method, MethodMetrics, MethodRow, MetricSample, StatsError};

/// Raw similarity scores for one candidate image. Auxiliary fields stay
/// empty unless a judge model is wired in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionScore {
    pub image_sim: f64,
    pub text_sim: f64,
    pub aesthetic: Option<f64>,
    pub preference: Option<f64>,
}

/// Scores a synthesized candidate against the reference image and the
/// target text. The fusion parameters that produced the candidate are
/// passed along so analytic test scorers can shape their response.
pub trait CandidateScorer: Send + Sync {
    fn score(
        &self,
        reference: &Array3<f64>,
        text: &str,
        candidate: &Array3<f64>,
        params: &FusionParams<f64>,
    ) -> Result<FusionScore, PerceptionError>;

    fn info(&self) -> ScoringInfo;
}

/// Production scorer: embedding-based similarities, with an empty text
/// contributing zero text similarity.
pub struct PerceptionCandidateScorer {
    scorer: PerceptionScorer<f64>,
}

impl PerceptionCandidateScorer {
    pub fn new(scorer: PerceptionScorer<f64>) -> Self {
        Self { scorer }
    }

    pub fn from_names(image_model: &str, joint_model: &str, seed: u64) -> Result<Self, PerceptionError> {
        Ok(Self::new(PerceptionScorer::from_names(
            image_model,
            joint_model,
            seed,
        )?))
    }
}

impl CandidateScorer for PerceptionCandidateScorer {
    fn score(
        &self,
        reference: &Array3<f64>,
        text: &str,
        candidate: &Array3<f64>,
        _params: &FusionParams<f64>,
    ) -> Result<FusionScore, PerceptionError> {
        let image_sim = self.scorer.image_similarity(reference, candidate)?;
        let text_sim = if text.is_empty() {
            0.0
        } else {
            self.scorer.text_similarity(candidate, text)?
        };
        Ok(FusionScore {
            image_sim,
            text_sim,
            aesthetic: None,
            preference: None,
        })
    }

    fn info(&self) -> ScoringInfo {
        let (image_model, joint_model) = self.scorer.model_ids();
        ScoringInfo {
            image_model,
            joint_model,
        }
    }
}

/// Test scorer whose similarities are affine in the cross-attention
/// scale: image `a + b alpha`, text `c + d alpha`, clamped to `[0, 1]`.
/// Pins the search landscape analytically, independent of any backend.
#[derive(Debug, Clone, Copy)]
pub struct LinearAlphaScorer {
    pub image: (f64, f64),
    pub text: (f64, f64),
}

impl CandidateScorer for LinearAlphaScorer {
    fn score(
        &self,
        _reference: &Array3<f64>,
        _text: &str,
        _candidate: &Array3<f64>,
        params: &FusionParams<f64>,
    ) -> Result<FusionScore, PerceptionError> {
        let eval = |(a, b): (f64, f64)| (a + b * params.alpha).clamp(0.0, 1.0);
        Ok(FusionScore {
            image_sim: eval(self.image),
            text_sim: eval(self.text),
            aesthetic: None,
            preference: None,
        })
    }

    fn info(&self) -> ScoringInfo {
        ScoringInfo {
            image_model: "analytic".into(),
            joint_model: "analytic".into(),
        }
    }
}

struct StageClock {
    times: BTreeMap<String, u64>,
}

impl StageClock {
    fn new() -> Self {
        Self {
            times: BTreeMap::new(),
        }
    }

    fn run<T>(
        &mut self,
        name: &str,
        f: impl FnOnce() -> Result<T, String>,
    ) -> Result<T, (String, String)> {
        let start = Instant::now();
        let outcome = f();
        *self.times.entry(name.to_string()).or_insert(0) +=
            start.elapsed().as_millis() as u64;
        outcome.map_err(|message| (name.to_string(), message))
    }
}

/// Runs one synthesis, resolving the backend and scorer from the config.
pub fn run_synthesis(config: &RunConfig) -> RunReport {
    let backend = match resolve_backend(&config.backend, config.seed) {
        Ok(b) => b,
        Err(err) => return failed_before_start(config, "config", err.to_string()),
    };
    let scorer =
        match PerceptionCandidateScorer::from_names(&config.image_model, &config.joint_model, config.seed) {
            Ok(s) => s,
            Err(err) => return failed_before_start(config, "config", err.to_string()),
        };
    run_synthesis_with(config, backend.as_ref(), &scorer)
}

fn failed_before_start(config: &RunConfig, stage: &str, message: String) -> RunReport {
    RunReport {
        run_id: run_id_for(config),
        status: RunStatus::Failed {
            stage: stage.to_string(),
            message,
        },
        config: config.clone(),
        config_hash: config_hash(config),
        result: None,
        step_losses: Vec::new(),
        injection_probes: Vec::new(),
        search: None,
        scoring: ScoringInfo {
            image_model: config.image_model.clone(),
            joint_model: config.joint_model.clone(),
        },
        output_image: None,
        wall_time_ms: 0,
        stage_time_ms: BTreeMap::new(),
    }
}

/// Runs one synthesis against an explicit backend and scorer.
pub fn run_synthesis_with(
    config: &RunConfig,
    backend: &dyn DiffusionBackend<f64>,
    scorer: &dyn CandidateScorer,
) -> RunReport {
    let started = Instant::now();
    let mut report = failed_before_start(config, "", String::new());
    report.status = RunStatus::Complete;
    report.scoring = scorer.info();
    let mut clock = StageClock::new();

    let outcome = execute(config, backend, scorer, &mut report, &mut clock);
    report.stage_time_ms = clock.times;
    report.wall_time_ms = started.elapsed().as_millis() as u64;
    if let Err((stage, message)) = outcome {
        report.status = RunStatus::Failed { stage, message };
    }

    if let Some(out_dir) = &config.out_dir {
        let run_dir = out_dir.join(&report.run_id);
        if let Err(err) = std::fs::create_dir_all(&run_dir)
            .map_err(|e| e.to_string())
            .and_then(|()| report.save(&run_dir.join("report.json")).map_err(|e| e.to_string()))
        {
            if matches!(report.status, RunStatus::Complete) {
                report.status = RunStatus::Failed {
                    stage: "persist".to_string(),
                    message: err,
                };
            }
        }
    }
    report
}

fn execute(
    config: &RunConfig,
    backend: &dyn DiffusionBackend<f64>,
    scorer: &dyn CandidateScorer,
    report: &mut RunReport,
    clock: &mut StageClock,
) -> Result<(), (String, String)> {
    let steps = config.num_steps;
    clock.run("config", || {
        config.harmony.validate().map_err(|e| e.to_string())?;
        config.balance.validate().map_err(|e| e.to_string())?;
        if steps == 0 {
            return Err("num_steps must be at least 1".to_string());
        }
        if let Some(i) = config.fixed_inject_step {
            if i > steps {
                return Err(format!("fixed injection step {i} exceeds {steps} steps"));
            }
        }
        if let Some(alpha) = config.fixed_alpha {
            if !alpha.is_finite() {
                return Err(format!("fixed alpha must be finite, got {alpha}"));
            }
        }
        Ok(())
    })?;

    let reference = clock.run("load-image", || {
        let [channels, height, width] = backend.image_shape();
        load_image::<f64>(&config.image, channels, (width, height)).map_err(|e| e.to_string())
    })?;

    let (z_0, conditioning, null_text, schedule) = clock.run("encode", || {
        let latent = backend.encode_image(&reference).map_err(|e| e.to_string())?;
        let z_0 = LatentCode::new(latent, 0).map_err(|e| e.to_string())?;
        let null_text = backend.encode_null().map_err(|e| e.to_string())?;
        let conditioning = if config.text.is_empty() {
            null_text.clone()
        } else {
            backend.encode_text(&config.text).map_err(|e| e.to_string())?
        };
        let schedule = backend.default_schedule(steps).map_err(|e| e.to_string())?;
        Ok((z_0, conditioning, null_text, schedule))
    })?;

    let inversion = clock.run("invert", || {
        invert(
            backend,
            &z_0,
            &null_text,
            &schedule,
            config.seed,
            config.renoise_iterations,
        )
        .map_err(|e| e.to_string())
    })?;

    // Replay the denoising branch from the top, capturing this branch's
    // self-attention maps and nudging each step's noise draw so the step
    // lands on the inversion trajectory.
    let (cache, bank) = {
        let mut cache = AttentionCache::new();
        let mut bank = inversion.noise.clone();
        let mut step_losses = Vec::with_capacity(steps);
        let top = inversion.trajectory[steps].clone();
        let outcome = clock.run("balance-noise", || {
            let mut z_hat = top;
            for t in (1..=steps).rev() {
                let mut router = AttentionRouter::capture(t, &mut cache);
                let e = backend
                    .denoise(z_hat.data(), &null_text, &mut router)
                    .map_err(|e| e.to_string())?;
                let (eps, losses) = optimize_noise(
                    z_hat.data(),
                    inversion.trajectory[t - 1].data(),
                    &e,
                    bank.get(t).map_err(|e| e.to_string())?,
                    &schedule,
                    t,
                    &config.balance,
                )
                .map_err(|e| e.to_string())?;
                let stepped = z_hat.data() * schedule.nu(t)
                    + &(&e * schedule.beta(t))
                    + &(&eps * schedule.gamma(t));
                bank.set(t, eps).map_err(|e| e.to_string())?;
                step_losses.push(StepLoss { t, losses });
                z_hat = LatentCode::new(stepped, t - 1).map_err(|e| e.to_string())?;
            }
            Ok(())
        });
        report.step_losses = step_losses;
        outcome?;
        (cache, bank)
    };

    let z_top = &inversion.trajectory[steps];

    // Synthesizing a candidate for given parameters, plus its score. The
    // scorer sees the parameters so analytic doubles can respond to them.
    let synthesize_and_score = |params: &FusionParams<f64>| -> Result<(Array3<f64>, FusionScore), String> {
        let trajectory = synthesize_with_params(
            backend,
            z_top,
            &conditioning,
            params,
            &cache,
            &bank,
            &schedule,
        )
        .map_err(|e| e.to_string())?;
        let candidate = backend
            .decode_latent(trajectory[0].data())
            .map_err(|e| e.to_string())?;
        let score = scorer
            .score(&reference, &config.text, &candidate, params)
            .map_err(|e| e.to_string())?;
        Ok((candidate, score))
    };

    let reconstruction_mode = config.text.is_empty();

    let inject_step = if let Some(fixed) = config.fixed_inject_step {
        fixed
    } else if reconstruction_mode {
        // Nothing to balance against: replay everything for fidelity.
        steps
    } else {
        let mut memo: BTreeMap<usize, f64> = BTreeMap::new();
        let (chosen, probes) = clock.run("adjust-injection", || {
            let budget = config
                .max_adjust_iterations
                .unwrap_or_else(|| (steps / 2).max(1));
            let init = steps / 2;
            adjust_injection_step(
                |i| -> Result<f64, String> {
                    if let Some(&known) = memo.get(&i) {
                        return Ok(known);
                    }
                    let params = FusionParams {
                        alpha: 1.0,
                        inject_step: i,
                    };
                    let (_, score) = synthesize_and_score(&params)?;
                    memo.insert(i, score.image_sim);
                    Ok(score.image_sim)
                },
                init,
                0,
                steps,
                budget,
                &config.harmony,
            )
            .map_err(|e| e.to_string())
        })?;
        report.injection_probes = probes;
        chosen
    };

    let alpha_star = if let Some(fixed) = config.fixed_alpha {
        fixed
    } else if reconstruction_mode {
        1.0
    } else {
        let (alpha, trace) = clock.run("search-alpha", || {
            golden_section_search(
                |alpha: f64| -> Result<f64, String> {
                    let params = FusionParams {
                        alpha,
                        inject_step,
                    };
                    let (_, score) = synthesize_and_score(&params)?;
                    let pair = SimilarityPair::new(score.image_sim, score.text_sim)
                        .map_err(|e| e.to_string())?;
                    score_f(pair, &config.harmony).map_err(|e| e.to_string())
                },
                config.harmony.alpha_min,
                config.harmony.alpha_max,
                config.harmony.alpha_tol,
            )
            .map_err(|e| e.to_string())
        })?;
        report.search = Some(trace);
        alpha
    };

    let params = FusionParams {
        alpha: alpha_star,
        inject_step,
    };
    let (candidate, score) = clock.run("synthesize", || synthesize_and_score(&params))?;

    let outcome = clock.run("score", || {
        let pair = SimilarityPair::new(score.image_sim, score.text_sim)
            .map_err(|e| e.to_string())?;
        let f_score = score_f(pair, &config.harmony).map_err(|e| e.to_string())?;
        let b_sim = balance_bsim(pair, &config.harmony).map_err(|e| e.to_string())?;
        Ok(FusionOutcome {
            alpha_star,
            inject_step,
            image_sim: pair.image(),
            text_sim: pair.text(),
            f_score,
            b_sim,
            aesthetic: score.aesthetic,
            preference: score.preference,
        })
    })?;
    report.result = Some(outcome);

    if let Some(out_dir) = &config.out_dir {
        let run_dir = out_dir.join(&report.run_id);
        let image_path = run_dir.join("output.png");
        let probes = report.injection_probes.clone();
        let search = report.search.clone();
        clock.run("persist", || {
            std::fs::create_dir_all(&run_dir).map_err(|e| e.to_string())?;
            save_image(&image_path, &candidate).map_err(|e| e.to_string())?;
            let mut trace = String::from("kind,x,value\n");
            for probe in &probes {
                trace.push_str(&format!("probe,{},{}\n", probe.i, probe.isim));
            }
            if let Some(search) = &search {
                for (alpha, value) in &search.evaluations {
                    trace.push_str(&format!("search,{alpha},{value}\n"));
                }
            }
            std::fs::write(run_dir.join("trace.csv"), trace).map_err(|e| e.to_string())?;
            Ok(())
        })?;
        report.output_image = Some(image_path);
    }

    Ok(())
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("cannot write batch outputs: {0}")]
    Io(#[from] std::io::Error),
}

/// Batch execution settings on top of a per-run template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub manifest: PathBuf,
    pub template: RunConfig,
    /// Deterministically subsample this many pairs before running.
    pub subsample: Option<usize>,
    /// Worker threads; `None` uses the process default.
    pub concurrency: Option<usize>,
    /// Method label used in aggregate tables.
    pub label: String,
    /// Phrase the text as a combination prompt naming both objects
    /// instead of using the raw object text.
    pub use_fusion_template: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub run_id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub label: String,
    pub total: usize,
    pub completed: usize,
    pub failed: usize,
    pub metrics: MethodMetrics,
    pub row: MethodRow,
    pub failures: Vec<FailureNote>,
}

/// Seed for one pair, derived so every pair gets an independent stream
/// that is stable across runs and platforms.
pub fn pair_seed(base: u64, image_id: &str, text_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{base}:{image_id}:{text_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn combination_prompt(image: &crate::manifest::ImageEntry, text: &crate::manifest::TextEntry) -> String {
    let image_name = image.id.replace('-', " ");
    format!(
        "a photo of an {image_name} creatively fused with a {}",
        text.text
    )
}

/// Runs every manifest pairing through the synthesis pipeline and
/// aggregates the completed runs into one method row.
pub fn run_batch(
    batch: &BatchConfig,
    backend: &dyn DiffusionBackend<f64>,
    scorer: &dyn CandidateScorer,
) -> Result<BatchSummary, BatchError> {
    let manifest = load_manifest(&batch.manifest)?;
    let mut pairs = manifest.pairings();
    if let Some(n) = batch.subsample {
        let mut rng = ChaCha8Rng::seed_from_u64(batch.template.seed);
        pairs.shuffle(&mut rng);
        pairs.truncate(n);
        pairs.sort_by(|a, b| (a.0.id.as_str(), a.1.id.as_str()).cmp(&(b.0.id.as_str(), b.1.id.as_str())));
    }

    let configs: Vec<RunConfig> = pairs
        .iter()
        .map(|(img, txt)| {
            let mut config = batch.template.clone();
            config.image = img.path.clone();
            config.text = if batch.use_fusion_template {
                combination_prompt(img, txt)
            } else {
                txt.text.clone()
            };
            config.seed = pair_seed(batch.template.seed, &img.id, &txt.id);
            config.run_id = Some(format!("{}--{}", img.id, txt.id));
            config
        })
        .collect();

    let run_all = || -> Vec<RunReport> {
        use rayon::prelude::*;
        if backend.concurrent_safe() {
            configs
                .par_iter()
                .map(|config| run_synthesis_with(config, backend, scorer))
                .collect()
        } else {
            configs
                .iter()
                .map(|config| run_synthesis_with(config, backend, scorer))
                .collect()
        }
    };
    let reports: Vec<RunReport> = match batch.concurrency {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool builds")
            .install(run_all),
        None => run_all(),
    };

    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for report in &reports {
        match (&report.status, &report.result) {
            (RunStatus::Complete, Some(outcome)) => samples.push(MetricSample {
                image_sim: outcome.image_sim,
                text_sim: outcome.text_sim,
                f_score: outcome.f_score,
                b_sim: outcome.b_sim,
                aesthetic: outcome.aesthetic,
                preference: outcome.preference,
            }),
            (RunStatus::Failed { stage, message }, _) => failures.push(FailureNote {
                run_id: report.run_id.clone(),
                stage: stage.clone(),
                message: message.clone(),
            }),
            (RunStatus::Complete, None) => failures.push(FailureNote {
                run_id: report.run_id.clone(),
                stage: "score".to_string(),
                message: "completed without a result".to_string(),
            }),
        }
    }

    let metrics = MethodMetrics {
        label: batch.label.clone(),
        samples,
    };
    let row = summarize_method(&metrics)?;
    let summary = BatchSummary {
        label: batch.label.clone(),
        total: reports.len(),
        completed: metrics.samples.len(),
        failed: failures.len(),
        metrics,
        row,
        failures,
    };

    if let Some(out_dir) = &batch.template.out_dir {
        std::fs::create_dir_all(out_dir)?;
        let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(out_dir.join("batch_summary.json"), body)?;
        let comparison = crate::stats::MethodComparison {
            rows: vec![summary.row.clone()],
            tests: Vec::new(),
        };
        let mut table = crate::stats::render_comparison(&comparison);
        if !summary.failures.is_empty() {
            table.push('\n');
            for f in &summary.failures {
                table.push_str(&format!("failed {} at {}: {}\n", f.run_id, f.stage, f.message));
            }
        }
        std::fs::write(out_dir.join("table.txt"), table)?;
    }

    Ok(summary)
}
