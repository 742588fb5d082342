//! Command-line front end: run experiments, force ablations, export data.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gearnet::harness::{self, ExperimentConfig, Preset};

#[derive(Parser)]
#[command(
    name = "gearnet",
    version,
    about = "Bilateral domain-adaptation training on synthetic domain pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the experiment-running subcommands.
#[derive(Args)]
struct RunFlags {
    /// Experiment config (TOML with [data], [noise], [train], [experiment]).
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Layer a named preset over the config: quick | paper-scale.
    #[arg(long)]
    preset: Option<Preset>,
    /// Metrics CSV destination (overrides the config's experiment.out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment exactly as configured.
    Run(RunFlags),
    /// Run with the baseline and the guide-loss ablation forced on.
    Ablation(RunFlags),
    /// Draw one domain pair and write <out-stem>_source.csv and
    /// <out-stem>_target.csv.
    GenData {
        /// Config file; only its [data] and [noise] sections are used.
        spec: PathBuf,
        /// Output stem, e.g. pair.csv -> pair_source.csv, pair_target.csv.
        out: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(flags) => execute(flags, false),
        Command::Ablation(flags) => execute(flags, true),
        Command::GenData { spec, out, seed } => gen_data(&spec, &out, seed),
    }
}

fn load(flags: &RunFlags) -> Result<ExperimentConfig> {
    let mut cfg = harness::load_config(&flags.config)
        .with_context(|| format!("loading {}", flags.config.display()))?;
    if let Some(preset) = flags.preset {
        preset.apply(&mut cfg);
    }
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn execute(flags: RunFlags, force_ablation: bool) -> Result<()> {
    let mut cfg = load(&flags)?;
    if force_ablation {
        cfg.experiment.run_baseline = true;
        cfg.experiment.run_beta0 = true;
    }
    let out_path = flags
        .out
        .or_else(|| cfg.experiment.out.clone())
        .unwrap_or_else(|| PathBuf::from("metrics.csv"));

    let outcome = harness::run_experiment(&cfg)?;
    for failure in &outcome.failures {
        eprintln!("run {} seed {} failed: {}", failure.run_id, failure.seed, failure.message);
    }
    if outcome.records.is_empty() {
        bail!("no run finished; {} failure(s)", outcome.failures.len());
    }
    harness::emit_csv(&outcome.records, &out_path)?;
    println!("wrote {} records to {}", outcome.records.len(), out_path.display());
    print!("{}", outcome.summary);
    if !outcome.failures.is_empty() {
        bail!("{} of the runs failed", outcome.failures.len());
    }
    Ok(())
}

fn gen_data(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg =
        harness::load_config(spec).with_context(|| format!("loading {}", spec.display()))?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let (source_path, target_path) = harness::generate_datasets(&cfg.data, &cfg.noise, seed, out)?;
    println!("wrote {} and {}", source_path.display(), target_path.display());
    Ok(())
}
