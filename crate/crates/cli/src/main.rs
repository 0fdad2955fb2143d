use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use giope::harness::{self, CellStatus, ExperimentConfig};

/// Group-level off-policy treatment effects with honest partitioning.
#[derive(Debug, Parser)]
#[command(name = "giope", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output file, or directory for `ablate`.
    #[arg(long)]
    out: PathBuf,
    /// Master seed; overrides the config's `seed` (and `seeds` for `ablate`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate behavior-policy trajectories to JSONL.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Grow a partition tree on the partitioning half of a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Estimate per-leaf effects with bootstrap intervals on the estimation half.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tree: PathBuf,
    },
    /// Write true effects for test points, and per leaf when a tree is given.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Run the variant ablation over every configured horizon and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, u64)> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.env.seed = seed;
    }
    let seed = cfg.env.seed;
    Ok((cfg, seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => {
            let (cfg, seed) = load(&common)?;
            let n = harness::cmd_simulate(&cfg, seed, &common.out)?;
            eprintln!("wrote {n} trajectories to {}", common.out.display());
        }
        Command::Fit { common, data } => {
            let (cfg, seed) = load(&common)?;
            let fitted = harness::cmd_fit(&cfg, seed, &data, &common.out)?;
            eprintln!(
                "tree with {} leaves ({} splits) written to {}",
                fitted.leaf_count,
                fitted.splits.len(),
                common.out.display()
            );
        }
        Command::Estimate { common, data, tree } => {
            let (cfg, seed) = load(&common)?;
            let est = harness::cmd_estimate(&cfg, seed, &data, &tree, &common.out)?;
            eprintln!("{} group estimates written to {}", est.len(), common.out.display());
        }
        Command::Oracle { common, tree } => {
            let (cfg, seed) = load(&common)?;
            let n = harness::cmd_oracle(&cfg, seed, tree.as_deref(), &common.out)?;
            eprintln!("{n} test points written to {}", common.out.display());
        }
        Command::Ablate { common } => {
            let (mut cfg, _) = load(&common)?;
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            let (rows, _) = harness::cmd_ablate(&cfg, &common.out)?;
            let failed = rows.iter().filter(|r| r.status == CellStatus::Failed).count();
            eprintln!(
                "{} cells ({failed} failed) written to {}",
                rows.len(),
                common.out.display()
            );
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
