use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vertfl::config::load_config;
use vertfl::harness::{bench_scaling, run_experiment, sweep, BenchOptions};

/// Federated-learning poisoning simulator.
#[derive(Parser)]
#[command(name = "vertfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, timings.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `output.dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run once per value of one config field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `section.key`, a bare section (`defense`), or a unique key (`pr`).
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Time VERT's per-round train-and-score phase at several model sizes.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        users: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
    /// Check a config file and print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path, workers: Option<usize>) -> Result<vertfl::config::ExperimentConfig> {
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(w) = workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        cfg.workers = w;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, workers } => {
            let cfg = load(&config, workers)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let summary = run_experiment(&cfg, Some(&dir))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            eprintln!("wrote {}", dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            workers,
        } => {
            let cfg = load(&config, workers)?;
            let root = out.unwrap_or_else(|| cfg.output.dir.clone());
            let index = sweep(&cfg, &axis, &values, &root)?;
            let mut failed = 0;
            for e in &index.entries {
                match (&e.summary, &e.error) {
                    (Some(s), _) => println!("{axis}={}: max_accuracy={:.4}", e.value, s.max_accuracy),
                    (None, Some(err)) => {
                        failed += 1;
                        println!("{axis}={}: failed: {err}", e.value);
                    }
                    (None, None) => {}
                }
            }
            if failed > 0 {
                bail!("{failed} of {} sweep runs failed", index.entries.len());
            }
        }
        Command::Bench {
            config,
            dims,
            users,
            repetitions,
        } => {
            let cfg = load(&config, None)?;
            let rows = bench_scaling(&cfg, &dims, BenchOptions { users, repetitions })?;
            println!("d,s,users,ms_per_round,state_values");
            for r in rows {
                println!("{},{},{},{:.3},{}", r.d, r.s, r.users, r.ms_per_round, r.state_values);
            }
        }
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            print!("{}", cfg.to_toml_string()?);
        }
    }
    Ok(())
}
