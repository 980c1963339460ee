//! `sapp`: generate instances, run experiments and validate the bounds.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sapp_core::experiment::{dataset_for_seed, inspect, run_experiment, ExperimentConfig, RunScope, Summary};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "sapp", version, about = "Tabular offline-RL workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured environment as MDP JSON.
    GenMdp {
        #[command(flatten)]
        common: Common,
        /// Validation seed index; garnets are redrawn per index.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample the configured dataset for one sweep seed and write it as CSV.
    GenDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every algorithm over the seed sweep, then run the validations.
    Run(Sweep),
    /// Run only the validations.
    Validate(Sweep),
    /// Dump ratio estimates and both bounds for one instance as JSON.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output file (gen-mdp, gen-dataset, inspect) or directory (run, validate).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    /// Replace the seed sweeps with `0..N`.
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    Config(anyhow::Error),
    Other(anyhow::Error),
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Config)
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn print_summary(summary: &Summary, dir: &Path) {
    for (name, alg) in &summary.algorithms {
        match &alg.stats {
            Some(s) => println!(
                "{name:<16} median {:.4}  IQR [{:.4}, {:.4}]  runs {}  failures {}",
                s.median,
                s.q1,
                s.q3,
                s.runs,
                alg.failures.len()
            ),
            None => println!("{name:<16} no successful runs, failures {}", alg.failures.len()),
        }
    }
    for (kind, v) in &summary.validations {
        let rate = v.violation_rate.map(|r| format!("  violation rate {r:.3}")).unwrap_or_default();
        println!(
            "{kind:<16} condition {}/{}  conclusion {}/{}  implication failures {}{rate}  failures {}",
            v.condition_count,
            v.completed,
            v.conclusion_count,
            v.completed,
            v.implication_failures,
            v.failures.len()
        );
    }
    println!("self-check {}", if summary.self_check { "ok" } else { "MISMATCH" });
    println!("wrote {}", dir.join("summary.json").display());
}

fn sweep(args: Sweep, scope: RunScope) -> Result<u8, Failure> {
    let mut config = load(&args.common.config)?;
    if let Some(dir) = args.common.out {
        config.output_dir = dir;
    }
    if let Some(n) = args.seeds {
        if n == 0 {
            return Err(Failure::Config(anyhow::anyhow!("--seeds must be at least 1")));
        }
        config.seeds = (0..n as u64).collect();
        config.validations.iter_mut().for_each(|v| v.seeds = n);
    }
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")
            .map_err(Failure::Other)?;
    }
    let summary = run_experiment(&config, scope).map_err(|e| Failure::Other(e.into()))?;
    print_summary(&summary, &config.output_dir);
    if summary.partial_failures() > 0 || !summary.self_check {
        Ok(EXIT_PARTIAL)
    } else {
        Ok(0)
    }
}

fn execute(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::GenMdp { common, seed } => {
            let config = load(&common.config)?;
            let env = match seed {
                Some(i) => config.environment.for_validation_seed(i),
                None => config.environment.clone(),
            };
            let run = || -> anyhow::Result<()> {
                let mdp = env.build()?;
                write_output(common.out.as_deref(), &serde_json::to_string_pretty(&mdp)?)
            };
            run().map_err(Failure::Other)?;
        }
        Command::GenDataset { common, seed } => {
            let config = load(&common.config)?;
            let run = || -> anyhow::Result<()> {
                let mdp = config.environment.build()?;
                let dataset = dataset_for_seed(&config, &config.environment, &mdp, seed)?;
                match common.out.as_deref() {
                    Some(path) => dataset.save_csv(path)?,
                    None => dataset.write_csv(std::io::stdout().lock())?,
                }
                Ok(())
            };
            run().map_err(Failure::Other)?;
        }
        Command::Run(args) => return sweep(args, RunScope::Everything),
        Command::Validate(args) => return sweep(args, RunScope::ValidationsOnly),
        Command::Inspect { common, seed } => {
            let config = load(&common.config)?;
            let run = || -> anyhow::Result<()> {
                let report = inspect(&config, seed)?;
                write_output(common.out.as_deref(), &serde_json::to_string_pretty(&report)?)
            };
            run().map_err(Failure::Other)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
