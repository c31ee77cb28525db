//! `fema` command line: train, ablate, report, eval.

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fema_harness::config::RunConfig;
use fema_harness::report::{cmd_report, ReportOptions, REPORT_DIR};
use fema_harness::run::{cmd_ablate, cmd_train, Axis};
use fema_harness::eval::{eval_checkpoint, write_table};

#[derive(Parser)]
#[command(name = "fema", version, about = "Failure episodic memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Added to every configured seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Output directory (defaults to `runs/<run.name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one memory setting over a list of values.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// epsilon, n_candidates, update_m, top_o, lambda_risk or fema.
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<String>,
        /// Output directory (defaults to `runs/<run.name>_<axis>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a training or sweep directory into CSV tables.
    Report {
        dir: PathBuf,
        /// Trailing episode window for the learning curve.
        #[arg(long)]
        window: Option<usize>,
        /// Return threshold for the efficiency table.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Roll out a checkpoint's deterministic policy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Environment name; defaults to the one trained on.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed_offset, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run.name));
            let summaries = cmd_train(&cfg, &out, seed_offset)?;
            for s in summaries {
                println!(
                    "seed {}: {} steps, {} episodes, {} hazards, mean length {:.1}",
                    s.seed, s.steps, s.episodes, s.hazards, s.mean_length
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Ablate { config, axis, values, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_{}", cfg.run.name, axis.name())));
            let sweep = cmd_ablate(&cfg, axis, &values, &out)?;
            println!("{} variants written to {}", sweep.variants.len(), out.display());
        }
        Command::Report { dir, window, threshold } => {
            let report = cmd_report(&dir, ReportOptions { window, threshold })?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.summary());
            println!("\nwrote {}", dir.join(REPORT_DIR).display());
        }
        Command::Eval { ckpt, env, episodes, seed } => {
            let table = eval_checkpoint(&ckpt, env.as_deref(), episodes, seed)?;
            write_table(io::stdout().lock(), &table)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
