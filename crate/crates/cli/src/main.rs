use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vcsim::runner::{self, CompareTable};
use vcsim::scenario::load_scenario;
use vcsim::strategies::StrategyConfig;

#[derive(Parser)]
#[command(name = "vcsim", version, about = "Simulate model/profile version-control strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and emit its report as JSON.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed (and SIM_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Write the kernel event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several scenarios and tabulate their headline metrics.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Print every valid strategy combination.
    ListStrategies,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SIM_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("SIM_SEED={v:?} is not a u64"))?)),
        Err(_) => Ok(None),
    }
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario, seed, trace, out } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(seed) = seed.or(env_seed()?) {
                s.seed = seed;
            }
            match runner::run_detailed(&s, trace.is_some()) {
                Ok(output) => {
                    if let (Some(path), Some(lines)) = (&trace, &output.trace) {
                        std::fs::write(path, runner::trace_text(lines))
                            .with_context(|| format!("writing {}", path.display()))?;
                    }
                    write_or_print(out.as_ref(), &output.report.to_json())?;
                    Ok(true)
                }
                Err(failed) => {
                    eprintln!("{failed}");
                    write_or_print(out.as_ref(), &failed.partial.to_json())?;
                    Ok(false)
                }
            }
        }
        Command::Compare { scenario, out } => {
            let mut runs = Vec::with_capacity(scenario.len());
            for path in &scenario {
                let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                runs.push((name, load_scenario(path)?));
            }
            let rows = runner::compare(&runs);
            print!("{}", CompareTable(&rows));
            let mut json = serde_json::to_string_pretty(&serde_json::to_value(&rows)?)?;
            json.push('\n');
            std::fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
            Ok(rows.iter().all(|r| r.error.is_none()))
        }
        Command::Validate { scenario } => {
            let s = load_scenario(&scenario)?;
            println!("ok: {} ({} users, {} servers, {} releases)", s.strategy, s.users, s.cloud_servers, s.releases.len());
            Ok(true)
        }
        Command::ListStrategies => {
            for c in StrategyConfig::all_combinations() {
                println!("{c}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
