//! Command-line front end: single-run synthesis, manifest batches, and
//! aggregate comparison tables over saved run reports.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fusion_core::backend::resolve_backend;
use fusion_core::pipeline::PerceptionCandidateScorer;
use fusion_core::report::load_run_dir;
use fusion_core::stats::{
    render_comparison, MethodMetrics, MetricSample, EXACT_PERMUTATION_BUDGET,
};
use fusion_core::{
    compare_methods, run_batch, run_synthesis, BatchConfig, RunConfig, RunStatus,
};

#[derive(Parser)]
#[command(name = "fusion", version, about = "Image-text object fusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse one image with one text and write the result.
    Synthesize(SynthesizeArgs),
    /// Run every pair of a dataset manifest and aggregate the metrics.
    Batch(BatchArgs),
    /// Compare saved run directories in one table.
    Report(ReportArgs),
}

/// Knobs shared by single runs and batch templates.
#[derive(Args)]
struct RunArgs {
    /// Random seed; in batch mode the per-pair seed is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Scale ratio between image and text similarity in the score.
    #[arg(long, default_value_t = 2.3)]
    k: f64,

    /// Weight of the balance penalty in the score.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,

    /// Stop threshold for the noise optimizer's loss ratio.
    #[arg(long, default_value_t = 125.0)]
    lambda: f64,

    /// Gradient step size of the noise optimizer.
    #[arg(long, default_value_t = 0.1)]
    step_size: f64,

    /// Iteration cap of the noise optimizer per step.
    #[arg(long, default_value_t = 50)]
    max_noise_iters: usize,

    /// Lower bound of the cross-attention scale search.
    #[arg(long, default_value_t = 0.0)]
    alpha_min: f64,

    /// Upper bound of the cross-attention scale search.
    #[arg(long, default_value_t = 2.0)]
    alpha_max: f64,

    /// Bracket width at which the scale search stops.
    #[arg(long, default_value_t = 0.1)]
    alpha_tol: f64,

    /// Lower edge of the fidelity band for injection adjustment.
    #[arg(long, default_value_t = 0.45)]
    isim_min: f64,

    /// Upper edge of the fidelity band for injection adjustment.
    #[arg(long, default_value_t = 0.85)]
    isim_max: f64,

    /// Number of sampler steps.
    #[arg(long, default_value_t = 4)]
    steps: usize,

    /// Diffusion backend name.
    #[arg(long, default_value = "toy")]
    backend: String,

    /// Image-feature model used for image-image similarity.
    #[arg(long, default_value = "pixel")]
    image_model: String,

    /// Joint text-image model used for text-image similarity.
    #[arg(long, default_value = "hashed-joint")]
    joint_model: String,

    /// Skip the scale search and use this cross-attention scale.
    #[arg(long)]
    fixed_alpha: Option<f64>,

    /// Skip the adjustment and use this injection step.
    #[arg(long = "fixed-i")]
    fixed_inject_step: Option<usize>,

    /// Probe budget for the injection adjustment; default is half the
    /// step count.
    #[arg(long)]
    max_adjust_iters: Option<usize>,

    /// Extra denoiser re-evaluations per inverse noising step.
    #[arg(long, default_value_t = 0)]
    renoise_iters: usize,

    /// Directory that receives run artifacts.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
}

impl RunArgs {
    fn to_config(&self) -> RunConfig {
        let mut config = RunConfig {
            seed: self.seed,
            num_steps: self.steps,
            backend: self.backend.clone(),
            image_model: self.image_model.clone(),
            joint_model: self.joint_model.clone(),
            fixed_alpha: self.fixed_alpha,
            fixed_inject_step: self.fixed_inject_step,
            max_adjust_iterations: self.max_adjust_iters,
            renoise_iterations: self.renoise_iters,
            out_dir: Some(self.out.clone()),
            ..RunConfig::default()
        };
        config.harmony.k = self.k;
        config.harmony.beta_weight = self.beta;
        config.harmony.alpha_min = self.alpha_min;
        config.harmony.alpha_max = self.alpha_max;
        config.harmony.alpha_tol = self.alpha_tol;
        config.harmony.isim_min = self.isim_min;
        config.harmony.isim_max = self.isim_max;
        config.balance.lambda = self.lambda;
        config.balance.step_size = self.step_size;
        config.balance.max_iterations = self.max_noise_iters;
        config.model_cache = std::env::var_os("FUSION_MODEL_CACHE").map(PathBuf::from);
        config.endpoint = std::env::var("FUSION_ENDPOINT").ok();
        config
    }
}

#[derive(Args)]
struct SynthesizeArgs {
    /// The object image to start from.
    #[arg(long, value_name = "PATH")]
    image: PathBuf,

    /// The object text to fuse in; empty reconstructs the image.
    #[arg(long, value_name = "STR")]
    text: String,

    /// Identifier for the run directory; derived from the config hash
    /// when absent.
    #[arg(long)]
    run_id: Option<String>,

    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct BatchArgs {
    /// Dataset manifest listing images, texts, and optional pairs.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Run only this many pairs, chosen deterministically by the seed.
    #[arg(long, value_name = "N")]
    subsample: Option<usize>,

    /// Worker threads; default uses the process-wide pool.
    #[arg(long, value_name = "N")]
    concurrency: Option<usize>,

    /// Method label used in the aggregate table.
    #[arg(long, default_value = "fusion")]
    label: String,

    /// Phrase each prompt as "a photo of an X creatively fused with a Y"
    /// instead of using the raw object text.
    #[arg(long)]
    fusion_template: bool,

    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to compare; each becomes one table row labeled by
    /// its directory name. Repeat for several methods.
    #[arg(long, value_name = "DIR", required = true)]
    runs: Vec<PathBuf>,

    /// Add exact permutation p-values next to the asymptotic ones.
    #[arg(long)]
    exact_p: bool,

    /// Cap on rank assignments the exact test may enumerate.
    #[arg(long, default_value_t = EXACT_PERMUTATION_BUDGET)]
    exact_budget: u64,

    /// Also write the table to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn synthesize(args: &SynthesizeArgs) -> Result<ExitCode> {
    let mut config = args.run.to_config();
    config.image = args.image.clone();
    config.text = args.text.clone();
    config.run_id = args.run_id.clone();

    let report = run_synthesis(&config);
    match &report.status {
        RunStatus::Complete => {
            let outcome = report
                .result
                .as_ref()
                .context("complete run carries a result")?;
            println!("run {}: complete in {} ms", report.run_id, report.wall_time_ms);
            println!(
                "  alpha* = {:.4}  inject step = {}",
                outcome.alpha_star, outcome.inject_step
            );
            println!(
                "  image_sim = {:.4}  text_sim = {:.4}  f_score = {:.4}  b_sim = {:.4}",
                outcome.image_sim, outcome.text_sim, outcome.f_score, outcome.b_sim
            );
            if let Some(path) = &report.output_image {
                println!("  image: {}", path.display());
            }
            println!(
                "  report: {}",
                args.run.out.join(&report.run_id).join("report.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        RunStatus::Failed { stage, message } => {
            eprintln!("run {}: failed at {stage}: {message}", report.run_id);
            Ok(ExitCode::FAILURE)
        }
    }
}

fn batch(args: &BatchArgs) -> Result<ExitCode> {
    let config = BatchConfig {
        manifest: args.manifest.clone(),
        template: args.run.to_config(),
        subsample: args.subsample,
        concurrency: args.concurrency,
        label: args.label.clone(),
        use_fusion_template: args.fusion_template,
    };
    let backend = resolve_backend(&config.template.backend, config.template.seed)?;
    let scorer = PerceptionCandidateScorer::from_names(
        &config.template.image_model,
        &config.template.joint_model,
        config.template.seed,
    )?;
    let summary = run_batch(&config, backend.as_ref(), &scorer)?;

    println!(
        "batch '{}': {} pairs, {} completed, {} failed",
        summary.label, summary.total, summary.completed, summary.failed
    );
    for failure in &summary.failures {
        eprintln!(
            "  {} failed at {}: {}",
            failure.run_id, failure.stage, failure.message
        );
    }
    println!(
        "  mean image_sim = {:.4}  text_sim = {:.4}  f_score = {:.4}  b_sim = {:.4}",
        summary.row.image_sim, summary.row.text_sim, summary.row.f_score, summary.row.b_sim
    );
    println!("  artifacts: {}", args.run.out.display());
    Ok(if summary.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn collect_method(dir: &PathBuf) -> Result<MethodMetrics> {
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let reports =
        load_run_dir(dir).with_context(|| format!("reading runs under {}", dir.display()))?;
    let samples: Vec<MetricSample> = reports
        .iter()
        .filter(|r| matches!(r.status, RunStatus::Complete))
        .filter_map(|r| r.result.as_ref())
        .map(|o| MetricSample {
            image_sim: o.image_sim,
            text_sim: o.text_sim,
            f_score: o.f_score,
            b_sim: o.b_sim,
            aesthetic: o.aesthetic,
            preference: o.preference,
        })
        .collect();
    if samples.is_empty() {
        bail!("no completed runs under {}", dir.display());
    }
    Ok(MethodMetrics { label, samples })
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let methods: Vec<MethodMetrics> = args
        .runs
        .iter()
        .map(collect_method)
        .collect::<Result<_>>()?;
    let budget = args.exact_p.then_some(args.exact_budget);
    let comparison = compare_methods(&methods, budget)?;
    let table = render_comparison(&comparison);
    print!("{table}");
    if let Some(path) = &args.out {
        std::fs::write(path, &table)
            .with_context(|| format!("writing table to {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synthesize(args) => synthesize(args),
        Command::Batch(args) => batch(args),
        Command::Report(args) => report(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
