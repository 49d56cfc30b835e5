//! The `gatefuse` command line: `generate`, `train`, `eval`, `ablate` and
//! `gradcheck`, each driven by a flat config file.

mod commands;
mod run_config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;

pub use commands::{
    ablation_variants, cmd_ablate, cmd_eval, cmd_generate, cmd_gradcheck, cmd_train, load_dataset, output_dir,
    write_metrics, write_provenance, AblationReport, AblationRow, TrainSummary, CHECKPOINT_FILE, OUT_ENV,
};
pub use run_config::{GradcheckConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gatefuse", version, about = "Gated query fusion with a mixture-of-experts head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output_dir`, then `$GATEFUSE_OUT/<config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset to a file.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset file path (default: `<out>/dataset.tsv`).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Train a model and write checkpoint, history and metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to load (default: `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the full model and every ablation variant.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare tape gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Maximum relative error per coordinate.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn resolve(common: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let dir = output_dir(&cfg, &common.config, common.out.as_deref());
    Ok((cfg, dir))
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { common, file } => {
            let (cfg, dir) = resolve(&common)?;
            let path = cmd_generate(&cfg, &dir, file.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Train { common, resume } => {
            let (cfg, dir) = resolve(&common)?;
            let summary = cmd_train(&cfg, &dir, resume.as_deref())?;
            println!("{} steps; outputs in {}\n", summary.steps, dir.display());
            print!("{}", summary.metrics.report());
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, dir) = resolve(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
            print!("{}", cmd_eval(&cfg, &dir, &ckpt)?.report());
        }
        Command::Ablate { common } => {
            let (cfg, dir) = resolve(&common)?;
            let report = cmd_ablate(&cfg, &dir)?;
            print!("{}", report.to_text());
            if report.rows.iter().any(|r| r.result.is_err()) {
                return Ok(1);
            }
        }
        Command::Gradcheck { common, tolerance } => {
            let (mut cfg, dir) = resolve(&common)?;
            if let Some(t) = tolerance {
                cfg.gradcheck.tolerance = t;
            }
            let report = cmd_gradcheck(&cfg, &dir)?;
            print!("{}", report.to_text());
            if !report.passed() {
                for t in report.failing() {
                    eprintln!(
                        "gradcheck: {} exceeds tolerance ({} of {} coordinates, max relative error {:e})",
                        t.name, t.flagged, t.checked, t.max_rel_err
                    );
                }
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (program name first), runs the command and maps errors to
/// exit status 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
