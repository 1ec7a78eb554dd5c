use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use scdn_core::sim_cli::{self, SimConfig};

#[derive(Parser)]
#[command(name = "scdn", version, about = "Vertical federated learning simulator with a mobile edge server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run once per value of a dotted config parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated; may be empty.
        #[arg(long, allow_hyphen_values = true, default_value = "")]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize several configurations side by side.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<SimConfig> {
    SimConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let result = sim_cli::run(&cfg)?;
            sim_cli::write_run(&cfg, &result, &out)?;
            println!(
                "{} rounds, final perf {:.4}, output in {}",
                result.metrics.len(),
                result.final_perf(),
                out.display()
            );
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = load(&config)?;
            let values: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect();
            let rows = sim_cli::sweep(&cfg, &param, &values)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("sweep.csv"), sim_cli::sweep_csv(&rows)?)?;
            println!("{} sweep rows written to {}", rows.len(), out.display());
        }
        Command::Compare { configs, out } => {
            if configs.is_empty() {
                bail!("--configs needs at least one path");
            }
            let labelled = configs
                .iter()
                .map(|p| Ok((p.display().to_string(), load(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let rows = sim_cli::compare(&labelled)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("compare.csv"), sim_cli::compare_csv(&rows)?)?;
            for r in &rows {
                println!(
                    "{:<30} {:<13} perf {:.4}  energy {:.3e}  iters {:.2}",
                    r.label,
                    r.method.name(),
                    r.final_perf,
                    r.energy.avg,
                    r.iters.avg
                );
            }
        }
    }
    Ok(())
}
