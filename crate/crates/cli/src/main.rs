use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simslab::lab::{self, Experiment, ExperimentConfig, RunOptions};
use simslab::LabError;

/// Score-based diffusion laboratory: negative guidance and self-consuming loops.
#[derive(Parser)]
#[command(name = "simslab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score model and write a checkpoint.
    Fit(Common),
    /// Draw samples from a checkpoint, optionally with guidance.
    Sample(Common),
    /// Evaluate guided generation over an omega x budget grid.
    SimsSweep(Common),
    /// Run a self-consuming training loop.
    Loop(Common),
    /// Run the mixture-proportion shift experiment.
    Shift(Common),
    /// Aggregate loop outputs into one report.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (JSON).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct RunFlags {
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: $SIMSLAB_WORKERS, else all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Also write each generation's internal synthetic set.
    #[arg(long)]
    debug_keep_internal_synthetic: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Optional report config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    /// Loop output directories or run record files.
    inputs: Vec<PathBuf>,
}

impl RunFlags {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            out: self.out.clone(),
            workers: self.workers,
            keep_internal: self.debug_keep_internal_synthetic,
        }
    }
}

fn load(path: &Path, expected: Experiment) -> simslab::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    if cfg.experiment != expected {
        return Err(LabError::Config(format!(
            "config describes experiment `{}` but the `{}` command was run",
            cfg.experiment.tag(),
            expected.tag()
        )));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> simslab::Result<lab::RunManifest> {
    let (kind, common) = match cli.command {
        Command::Fit(c) => (Experiment::Fit, c),
        Command::Sample(c) => (Experiment::Sample, c),
        Command::SimsSweep(c) => (Experiment::SimsSweep, c),
        Command::Loop(c) => (Experiment::Loop, c),
        Command::Shift(c) => (Experiment::Shift, c),
        Command::Report(r) => {
            let cfg = match &r.config {
                Some(p) => load(p, Experiment::Report)?,
                None => lab::report_config(),
            };
            let mut inputs = cfg.report.as_ref().map(|s| s.inputs.clone()).unwrap_or_default();
            inputs.extend(r.inputs.iter().cloned());
            let mut opts = r.run.options();
            if opts.out.is_none() && cfg.output_dir.is_none() {
                opts.out = Some(PathBuf::from("."));
            }
            return lab::cmd_report(cfg, &inputs, &opts);
        }
    };
    let cfg = load(&common.config, kind)?;
    lab::run_experiment(cfg, &common.run.options())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            let dir = manifest.config.output_dir.clone().unwrap_or_default();
            eprintln!(
                "{}: wrote {} file(s) to {}",
                manifest.experiment.tag(),
                manifest.outputs.len(),
                dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
