use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use safm::evaluation::fmt_bwt;
use safm::experiment::{self, ExperimentConfig, Method};
use safm::tasks::{make_stream, write_stream, Scenario, StreamOptions};

#[derive(Parser)]
#[command(name = "safm", version, about = "Sparse adapter fusion continual-learning runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured seed (or just one) and write per-seed artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the method in the config file.
        #[arg(long)]
        method: Option<Method>,
        /// Runs only this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate finished runs under a directory into summary tables.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write a task stream to disk as JSONL splits plus a manifest.
    GenTasks {
        #[arg(long, default_value = "similar")]
        scenario: Scenario,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, method, seed } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            for r in experiment::run(&cfg)? {
                println!(
                    "{} seed {}: score {:.2} bwt {} params {}",
                    r.method,
                    r.seed,
                    100.0 * r.score,
                    fmt_bwt(r.bwt),
                    r.learnable_params
                );
            }
        }
        Command::Report { dir } => print!("{}", experiment::report(&dir)?),
        Command::GenTasks { scenario, n, seed, out } => {
            let stream = make_stream(scenario, n, seed, &StreamOptions::default())?;
            write_stream(&out, &stream)?;
            println!("wrote {} tasks to {}", stream.tasks.len(), out.display());
        }
    }
    Ok(())
}
