//! Command-line runner for the crossing-time pipeline.
//!
//! Stages read and write under the config's output directory, so any
//! prefix of the pipeline can be rerun without repeating the rest. Errors
//! land in `error.json` next to the artifacts with a stable `kind` field
//! and a matching exit code, so wrappers can branch without parsing text.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use crosstime_core::config::{ConfigError, RunConfig};
use crosstime_core::evaluate::EvalReport;
use crosstime_core::pipeline::{self, run_all, run_stage, PipelineError, Stage};

#[derive(Parser)]
#[command(
    name = "crosstime",
    version,
    about = "Pedestrian crossing-time pipeline: synthetic scenes, sub-class \
             labels, completion-time models, and crossing decisions"
)]
struct Cli {
    /// Run configuration JSON. Omitted: a built-in synthetic scenario is
    /// used and its config snapshot is saved into the output directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for the built-in synthetic scenario. Falls back to
    /// $CROSSTIME_OUT_DIR. Ignored when --config is given.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the run seed (reseeds the scene, the SVM, and training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the data-parallel paths; 0 keeps the default.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in synthetic run configuration to a file for editing.
    Init {
        #[arg(default_value = "config.json")]
        path: PathBuf,
    },
    /// Generate the synthetic scene (tracks, SPaT log, ground truth).
    Synth,
    /// Parse raw tracks and apply the trajectory filter rules.
    Preprocess,
    /// Label sub-classes by criteria, SVM, and PCA separability.
    Classify,
    /// Split trajectories and materialize sliding windows.
    Augment,
    /// Train every architecture/window/ablation grid cell.
    Train,
    /// Score all trained cells on the held-out trajectories.
    Evaluate,
    /// Emit per-frame crossing-feasibility decisions from the best cell.
    Decide,
    /// Run every stage in order.
    All,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Synth => Some(Stage::Synth),
            Command::Preprocess => Some(Stage::Preprocess),
            Command::Classify => Some(Stage::Classify),
            Command::Augment => Some(Stage::Augment),
            Command::Train => Some(Stage::Train),
            Command::Evaluate => Some(Stage::Evaluate),
            Command::Decide => Some(Stage::Decide),
            Command::Init { .. } | Command::All => None,
        }
    }
}

fn out_dir_fallback(cli: &Cli) -> Option<PathBuf> {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("CROSSTIME_OUT_DIR").map(PathBuf::from))
}

/// Loads the config file or builds the synthetic default, applying the
/// seed override either way.
fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    if let Some(path) = &cli.config {
        if cli.out.is_some() {
            log::warn!("--out is ignored when --config is given");
        }
        let mut config =
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(seed) = cli.seed {
            config.set_seed(seed);
            config.validate()?;
        }
        Ok(config)
    } else {
        let out = out_dir_fallback(cli).ok_or_else(|| {
            ConfigError::Invalid(
                "no run configured: pass --config, --out, or set CROSSTIME_OUT_DIR".into(),
            )
        })?;
        Ok(RunConfig::synthetic_default(&out, cli.seed.unwrap_or(0)))
    }
}

fn print_best_cell(config: &RunConfig) {
    let path = Stage::Evaluate.dir(config).join(pipeline::EVAL_REPORT_FILE);
    let Ok(report) = EvalReport::load(&path) else {
        return;
    };
    let Some(best) = report.best else { return };
    if let Some(cell) = report.cells.iter().find(|c| c.key == best) {
        println!(
            "best cell {} test RMSE {:.3} s over {} windows",
            cell.key, cell.test_rmse, cell.n_windows
        );
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Init { path } = &cli.command {
        let out = out_dir_fallback(cli).unwrap_or_else(|| PathBuf::from("runs/synthetic"));
        let config = RunConfig::synthetic_default(&out, cli.seed.unwrap_or(0));
        config.save(path)?;
        println!("wrote synthetic run config to {}", path.display());
        return Ok(());
    }

    let config = resolve_config(cli)?;
    std::fs::create_dir_all(&config.paths.out_dir)
        .with_context(|| format!("creating {}", config.paths.out_dir.display()))?;
    if cli.config.is_none() {
        // Snapshot the generated config so the run can be repeated.
        config.save(&config.paths.out_dir.join("config.json"))?;
    }

    match &cli.command {
        Command::All => {
            let ran = run_all(&config)?;
            let names: Vec<&str> = ran.iter().map(|s| s.name()).collect();
            println!("completed stages: {}", names.join(", "));
            print_best_cell(&config);
        }
        command => {
            let stage = command.stage().expect("init and all handled above");
            run_stage(&config, stage)?;
            println!("stage {stage} complete");
            if stage == Stage::Evaluate {
                print_best_cell(&config);
            }
        }
    }
    Ok(())
}

/// Stable error category and exit code. 2 means the config is unusable,
/// 3 means an upstream stage has not run yet, 1 is everything else.
fn classify_error(err: &anyhow::Error) -> (&'static str, u8) {
    if let Some(p) = err.downcast_ref::<PipelineError>() {
        return match p {
            PipelineError::MissingUpstreamArtifact { .. } => ("missing_artifact", 3),
            PipelineError::Config(_) | PipelineError::SynthNotConfigured => ("config", 2),
            _ => ("pipeline", 1),
        };
    }
    if err.downcast_ref::<ConfigError>().is_some() {
        return ("config", 2);
    }
    ("other", 1)
}

fn write_error_report(dir: &Path, kind: &str, message: &str) {
    let report = serde_json::json!({ "kind": kind, "message": message });
    let path = dir.join("error.json");
    if std::fs::create_dir_all(dir).is_err() {
        return;
    }
    if let Err(e) = std::fs::write(&path, report.to_string()) {
        log::warn!("could not write {}: {e}", path.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    #[cfg(feature = "parallel")]
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if cli.workers > 0 {
        log::warn!("built without the parallel feature; --workers is ignored");
    }

    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify_error(&err);
            let message = format!("{err:#}");
            log::error!("{message}");
            // Best effort: drop the report where the artifacts live, or
            // where they would have lived.
            let error_dir = cli
                .config
                .as_ref()
                .and_then(|p| RunConfig::load(p).ok().map(|c| c.paths.out_dir))
                .or_else(|| out_dir_fallback(&cli));
            if let Some(dir) = error_dir {
                write_error_report(&dir, kind, &message);
            }
            ExitCode::from(code)
        }
    }
}
