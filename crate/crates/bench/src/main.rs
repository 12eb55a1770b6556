use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dmsim_bench::experiment;
use dmsim_bench::run::run;
use dmsim_bench::workload::parse_workload;

#[derive(Parser)]
#[command(name = "dmsim", about = "Disaggregated memory simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one workload and write a JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named experiment and write a CSV table.
    Experiment {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            workload,
            seed,
            out,
        } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = dmsim::config::parse(&text)
                .with_context(|| format!("invalid config {}", config.display()))?;
            let text = fs::read_to_string(&workload)
                .with_context(|| format!("reading {}", workload.display()))?;
            let base = workload.parent().unwrap_or(std::path::Path::new("."));
            let mut spec = parse_workload(&text, base)
                .with_context(|| format!("invalid workload {}", workload.display()))?;
            cfg.net.seed = seed;
            spec.seed = seed;
            let report = run(&cfg, &spec)?;
            fs::write(&out, report.to_json())
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Experiment { name, seed, out } => {
            let table = experiment::by_name(&name, seed)?;
            fs::write(&out, table.to_csv())
                .with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}
