use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use clearn::analytic::{analytic_density, example1_fixed_point, example2_fixed_points, FixedPointReport};
use clearn::envs::Env;
use clearn::experiment::{execute, plot, ExperimentConfig, SweepResult};
use clearn::mdp::dirichlet_policy;
use clearn::rng::SeedTree;

#[derive(Parser)]
#[command(name = "clearn", version, about = "Future-state density estimation by recursive classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method over all seeds.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the recipe named in the config and check its gates.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a results CSV as SVG.
    Plot {
        results: PathBuf,
        #[arg(long)]
        layout: String,
        /// Defaults to the results path with an `.svg` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the exact discounted future-state density of a Dirichlet policy.
    Analytic {
        env: String,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Print the relabeled Q-learning fixed point of a counterexample.
    Oracle {
        example: Example,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        lambda: f64,
        /// Number of states for example 1.
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Example {
    Example1,
    Example2,
}

/// Marks a run whose acceptance gates failed.
#[derive(Debug)]
struct GateFailure(usize);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} acceptance gate(s) failed", self.0)
    }
}

impl std::error::Error for GateFailure {}

fn load_config(path: &PathBuf, out: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn report_json(report: &FixedPointReport) -> serde_json::Value {
    let mut values = serde_json::Map::new();
    for (k, v) in &report.values {
        values.insert(k.clone(), serde_json::json!(v));
    }
    serde_json::json!({
        "values": values,
        "iterations": report.iterations,
        "residual": report.residual,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config, out)?;
            let artifacts = execute(&cfg, None)?;
            println!("wrote {}", artifacts.results.display());
        }
        Command::Sweep { config, out } => {
            let cfg = load_config(&config, out)?;
            let Some(recipe) = cfg.recipe else {
                return Err(clearn::Error::Config("sweep needs a \"recipe\" in the config".into()).into());
            };
            let artifacts = execute(&cfg, Some(recipe))?;
            for gate in &artifacts.outcome.gates {
                println!("{}", gate.line());
            }
            println!("wrote {}", artifacts.results.display());
            let failed = artifacts.outcome.gates.iter().filter(|g| !g.passed).count();
            if failed > 0 {
                bail!(GateFailure(failed));
            }
        }
        Command::Plot { results, layout, out } => {
            let file = File::open(&results).with_context(|| format!("cannot open {}", results.display()))?;
            let table = SweepResult::read_csv(BufReader::new(file))?;
            let svg = plot::render(&table, &layout)?;
            let out = out.unwrap_or_else(|| results.with_extension("svg"));
            std::fs::write(&out, svg)?;
            println!("wrote {}", out.display());
        }
        Command::Analytic { env, gamma, out, seed, alpha } => {
            let env = Env::from_name(&env)?;
            let mdp = env.mdp();
            let mut rng = SeedTree::new(seed).child(0).named("behavior").rng();
            let policy = dirichlet_policy(mdp, alpha, &mut rng)?;
            let density = analytic_density(mdp, &policy, gamma)?;
            let mut w = BufWriter::new(File::create(&out)?);
            density.write_csv(&mut w)?;
            w.flush()?;
            println!("wrote {}", out.display());
        }
        Command::Oracle { example, gamma, lambda, n } => {
            let report = match example {
                Example::Example1 => example1_fixed_point(n, gamma, lambda)?,
                Example::Example2 => example2_fixed_points(gamma, lambda)?,
            };
            println!("{}", serde_json::to_string_pretty(&report_json(&report))?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GateFailure>().is_some() {
        return 4;
    }
    match err.downcast_ref::<clearn::Error>() {
        Some(clearn::Error::Numerical(_) | clearn::Error::Sampling(_) | clearn::Error::Decode(_)) => 3,
        Some(clearn::Error::Gate(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
