use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcis_bench::{costs, dump, experiment, sweep, ExperimentConfig, Result};

#[derive(Parser)]
#[command(
    name = "mcis-bench",
    version,
    about = "Markov chain importance sampling benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded repetitions and write raw.csv, curves.csv and metadata.json.
    Run { config: PathBuf },
    /// Sweep the proposal scale and write sweep.csv.
    Sweep { config: PathBuf },
    /// Compare predicted and measured prolongation; writes costs.csv.
    BenchCosts { config: PathBuf },
    /// Write one trace_<seed>.csv per configured seed.
    DumpTrace { config: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let out = experiment::run_experiment(&cfg)?;
            for r in &out.results {
                for s in &r.skipped {
                    eprintln!("skipped {} for seed {}: {}", s.estimator, s.seed, s.reason);
                }
            }
            println!("{}", out.raw.display());
            println!("{}", out.curves.display());
            println!("{}", out.metadata.display());
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let out = sweep::scaling_sweep(&cfg)?;
            for r in &out.rungs {
                eprintln!("theta {:.4}  acceptance {:.3}", r.theta, r.acceptance_rate);
            }
            println!("{}", out.csv.display());
        }
        Command::BenchCosts { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let (path, levels) = costs::bench_costs(&cfg)?;
            for l in &levels {
                eprintln!(
                    "inflation x{:<4} predicted {:>10.3}  measured {:>10.3}",
                    l.inflation, l.predicted, l.measured.ratio
                );
            }
            println!("{}", path.display());
        }
        Command::DumpTrace { config } => {
            let cfg = ExperimentConfig::load(config)?;
            for p in dump::dump_traces(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
