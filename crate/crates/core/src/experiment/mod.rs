//! Experiment harness.

pub mod config;
pub mod plot;
pub mod recipes;
pub mod run;

use std::path::PathBuf;

pub use config::{ExperimentConfig, Method, Recipe};
pub use recipes::{run_recipe, run_single, Gate, RecipeOutcome};
pub use run::{run_grid, Cell, ResultRow, SeedContext, SweepResult};

/// Files written by [`execute`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub results: PathBuf,
    pub plot: PathBuf,
    pub outcome: RecipeOutcome,
}

/// Runs `recipe` (or the single configured method) and writes
/// `config.json`, `VERSION`, `results.csv`, `plot.svg`, `gates.txt` and
/// per-cell telemetry into the configured output directory.
pub fn execute(cfg: &ExperimentConfig, recipe: Option<Recipe>) -> crate::Result<RunArtifacts> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    run::write_run_header(cfg, &dir)?;
    let telemetry = dir.join("telemetry");
    let outcome = match recipe {
        Some(r) => run_recipe(r, cfg, Some(&telemetry))?,
        None => run_single(cfg, Some(&telemetry))?,
    };
    let results = run::results_path(&dir);
    run::write_results(&outcome.result, &results)?;
    let layout = recipe.map(Recipe::layout).unwrap_or("kl-bars");
    let plot = dir.join("plot.svg");
    std::fs::write(&plot, plot::render(&outcome.result, layout)?)?;
    let gates: String = outcome.gates.iter().map(|g| g.line() + "\n").collect();
    std::fs::write(dir.join("gates.txt"), gates)?;
    Ok(RunArtifacts { dir, results, plot, outcome })
}
