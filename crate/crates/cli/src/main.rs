use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hes_core::benchfuncs::{speckled_peaks_raster, two_ridge_raster};
use hes_core::config::{parse_seeds, ExperimentConfig, KEYS};
use hes_core::oracles;
use hes_core::runner::{aggregate_dir, run_and_write, Experiment};

#[derive(Parser)]
#[command(name = "hes", version, about = "H-entropy search experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-trial CSVs plus summary.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; overrides the file and HES_SEED.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// HES, RS, US, KG, EI or POM.
        #[arg(long)]
        acq: Option<String>,
    },
    /// Rebuild summary.csv from the trial files in a directory.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Finite-difference checks of every loss reduction and the one-shot objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// One-shot EHIG with the negative-value loss against nested-MC KG.
    OracleKg,
    /// Past-query EHIG against analytic expected improvement.
    OracleEi,
    /// Indicator-loss EHIG against analytic probability of improvement.
    OraclePi {
        #[arg(long, default_value_t = 4096)]
        fantasies: usize,
    },
    /// Write a built-in synthetic raster as CSV.
    ExportRaster {
        /// two_ridge or speckled_peaks.
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every configuration key.
    Keys,
}

fn run(config: PathBuf, seeds: Option<String>, out: Option<PathBuf>, acq: Option<String>) -> Result<bool> {
    let mut cfg = ExperimentConfig::from_file(&config)?;
    cfg.apply_env()?;
    if let Some(s) = seeds {
        cfg.seeds = parse_seeds(&s).map_err(anyhow::Error::msg).context("--seeds")?;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(a) = acq {
        cfg.acquisition.id = a.parse()?;
    }
    let exp = Experiment::build(&cfg)?;
    let (outcomes, summary) = run_and_write(&exp)?;
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    if let Some(last) = summary.last() {
        println!(
            "{} / {}: iteration {} mean {} = {:.4} ± {:.4} over {} seeds ({})",
            cfg.acquisition.id,
            exp.spec.name(),
            last.iteration,
            exp.metric_name(),
            last.mean,
            last.stderr,
            last.n_seeds,
            cfg.output_dir.display()
        );
    }
    if failed > 0 {
        eprintln!("{failed} trial(s) aborted; see the .error.txt files");
    }
    Ok(failed == 0)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, seeds, out, acq } => run(config, seeds, out, acq),
        Command::Aggregate { input } => {
            let rows = aggregate_dir(&input)?;
            println!("wrote {} rows to {}", rows.len(), input.join("summary.csv").display());
            Ok(true)
        }
        Command::Gradcheck { instances } => {
            let reports = oracles::gradcheck_suite(instances);
            for r in &reports {
                println!("{r}");
            }
            Ok(reports.iter().all(|r| r.passed()))
        }
        Command::OracleKg => {
            let r = oracles::kg_oracle();
            println!("{r}");
            Ok(r.passed())
        }
        Command::OracleEi => {
            let r = oracles::ei_oracle();
            println!("{r}");
            Ok(r.passed())
        }
        Command::OraclePi { fantasies } => {
            let r = oracles::pi_oracle(fantasies);
            println!("{r}");
            Ok(r.passed())
        }
        Command::ExportRaster { name, out } => {
            let grid = match name.as_str() {
                "two_ridge" => two_ridge_raster(),
                "speckled_peaks" => speckled_peaks_raster(),
                _ => bail!("unknown raster `{name}` (two_ridge or speckled_peaks)"),
            };
            std::fs::write(&out, grid.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            Ok(true)
        }
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<32} {doc}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
