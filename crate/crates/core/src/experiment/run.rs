use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Method};
use crate::analytic::{analytic_density, forward_kl, goal_reaching_density};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::learners::{
    density_from_classifier, mc_c_step, mixed_c_step, q_hindsight_step, tabular_c_optimality_iteration,
    tabular_c_value_iteration, td_c_step, ClassifierModel, LearnerConfig, TargetMode,
};
use crate::mdp::{dirichlet_policy, floor_and_normalize, ReplayBuffer, StochasticPolicy};
use crate::rng::SeedTree;

pub const RESULTS_HEADER: &str = "experiment,env,method,gamma,lambda,seed,step,kl,mass,wall_ms";
pub const TELEMETRY_HEADER: &str = "step,loss,kl,mass_mean";
pub const MARGINAL_FLOOR: f64 = 1e-6;
const TABULAR_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub env: String,
    pub method: Method,
    pub gamma: f64,
    /// Relabel ratio for Q-learning, mix ratio for mixed C-learning.
    pub lambda: Option<f64>,
    pub seed: usize,
    pub step: usize,
    pub kl: f64,
    pub mass: f64,
    pub wall_ms: u64,
}

/// One row per (cell, seed).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<ResultRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{RESULTS_HEADER}")?;
        for r in &self.rows {
            let lambda = r.lambda.map(|l| l.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.experiment, r.env, r.method, r.gamma, lambda, r.seed, r.step, r.kl, r.mass, r.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != RESULTS_HEADER {
            return Err(Error::Parse(format!("unexpected results header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad("field count"));
            }
            rows.push(ResultRow {
                experiment: f[0].to_string(),
                env: f[1].to_string(),
                method: f[2].parse().map_err(|_| bad("method"))?,
                gamma: f[3].parse().map_err(|_| bad("gamma"))?,
                lambda: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad("lambda"))?) },
                seed: f[5].parse().map_err(|_| bad("seed"))?,
                step: f[6].parse().map_err(|_| bad("step"))?,
                kl: f[7].parse().map_err(|_| bad("kl"))?,
                mass: f[8].parse().map_err(|_| bad("mass"))?,
                wall_ms: f[9].parse().map_err(|_| bad("wall_ms"))?,
            });
        }
        Ok(SweepResult { rows })
    }

    pub fn select(&self, method: Method, gamma: f64, lambda: Option<f64>) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.method == method && r.gamma == gamma && r.lambda == lambda).collect()
    }

    pub fn median_kl(&self, method: Method, gamma: f64, lambda: Option<f64>) -> f64 {
        median(self.select(method, gamma, lambda).iter().map(|r| r.kl))
    }

    pub fn median_mass(&self, method: Method, gamma: f64, lambda: Option<f64>) -> f64 {
        median(self.select(method, gamma, lambda).iter().map(|r| r.mass))
    }
}

/// Median; NaN for an empty input.
pub fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One point of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub gamma: f64,
    pub lambda: Option<f64>,
}

impl Cell {
    pub fn new(method: Method, gamma: f64, lambda: Option<f64>) -> Self {
        Cell { method, gamma, lambda }
    }

    pub fn key(&self) -> String {
        match self.lambda {
            Some(l) => format!("{}-g{}-l{}", self.method, self.gamma, l),
            None => format!("{}-g{}", self.method, self.gamma),
        }
    }
}

/// Data shared by every cell of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: usize,
    pub env: Env,
    pub behavior: StochasticPolicy,
    /// Policy whose future-state density is estimated.
    pub target: StochasticPolicy,
    pub buffer: ReplayBuffer,
    /// Goal distribution for training and density read-out.
    pub marginal: Vec<f64>,
    pub tree: SeedTree,
}

impl SeedContext {
    pub fn build(cfg: &ExperimentConfig, seed: usize) -> Result<Self> {
        let env = Env::from_name(&cfg.env)?;
        let mdp = env.mdp();
        let tree = SeedTree::new(cfg.root_seed).child(seed as u64);
        let behavior = dirichlet_policy(mdp, cfg.dirichlet_alpha, &mut tree.named("behavior").rng())?;
        let target = if cfg.off_policy {
            dirichlet_policy(mdp, cfg.dirichlet_alpha, &mut tree.named("target").rng())?
        } else {
            behavior.clone()
        };
        let buffer = ReplayBuffer::collect(
            mdp,
            &behavior,
            cfg.num_trajectories,
            cfg.trajectory_length,
            &mut tree.named("buffer").rng(),
        )?;
        let marginal = if cfg.uniform_goals {
            vec![1.0 / mdp.num_states() as f64; mdp.num_states()]
        } else {
            buffer.empirical_marginal()
        };
        Ok(SeedContext { seed, env, behavior, target, buffer, marginal, tree })
    }

    /// Strictly positive version of the marginal for tabular operators.
    pub fn tabular_marginal(&self) -> Vec<f64> {
        floor_and_normalize(&self.marginal, MARGINAL_FLOOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryRow {
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub mass_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// KL against `truth` and mean unnormalized mass of a trained model.
pub fn score(model: &ClassifierModel, truth: &crate::analytic::DiscountedDensity, marginal: &[f64]) -> Result<(f64, f64)> {
    let (raw, _) = density_from_classifier(model, marginal)?;
    let masses: Vec<f64> = raw.slices().map(|s| s.iter().sum()).collect();
    Ok((forward_kl(truth, &raw)?, mean(&masses)))
}

struct TelemetryWriter(Option<BufWriter<File>>);

impl TelemetryWriter {
    fn open(dir: Option<&Path>, name: &str) -> Result<Self> {
        let Some(dir) = dir else { return Ok(TelemetryWriter(None)) };
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        writeln!(w, "{TELEMETRY_HEADER}")?;
        w.flush()?;
        Ok(TelemetryWriter(Some(w)))
    }

    fn push(&mut self, row: &TelemetryRow) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{},{},{},{}", row.step, row.loss, row.kl, row.mass_mean)?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Trains one cell on one seed's data and scores it.
pub fn train_cell(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    cell: &Cell,
    telemetry_dir: Option<&Path>,
) -> Result<(ResultRow, Vec<TelemetryRow>)> {
    let started = Instant::now();
    let mdp = ctx.env.mdp();
    let mut rng = ctx.tree.named(&cell.key()).rng();
    let mut telemetry = Vec::new();
    let mut writer = TelemetryWriter::open(telemetry_dir, &format!("{}-seed{}.csv", cell.key(), ctx.seed))?;
    let (step, kl, mass) = match cell.method {
        Method::TabularC => {
            let marginal = ctx.tabular_marginal();
            let ratio = tabular_c_value_iteration(mdp, &ctx.target, &marginal, cell.gamma, TABULAR_TOL)?;
            let truth = analytic_density(mdp, &ctx.target, cell.gamma)?;
            let model = ClassifierModel::from_ratio(&ratio);
            let (kl, mass) = score(&model, &truth, &marginal)?;
            (0, kl, mass)
        }
        Method::TabularCOpt => {
            let marginal = ctx.tabular_marginal();
            let (ratio, policy) = tabular_c_optimality_iteration(mdp, &marginal, cell.gamma, TABULAR_TOL)?;
            let evaluated = goal_reaching_density(mdp, &policy, cell.gamma)?;
            // Gap between the iterated and the evaluated goal-reaching density.
            let ns = mdp.num_states();
            let mut gap = 0.0f64;
            for s in 0..ns {
                for g in 0..ns {
                    let best = (0..mdp.num_actions()).map(|a| ratio.get(s, a, g)).fold(f64::NEG_INFINITY, f64::max);
                    gap = gap.max((best * marginal[g] - evaluated[s * ns + g]).abs());
                }
            }
            let model = ClassifierModel::from_ratio(&ratio);
            let masses = crate::learners::normalization_mass(&model, &marginal)?;
            (0, gap, mean(&masses))
        }
        method => {
            let lambda = cell.lambda;
            let lcfg = learner_for(cfg, ctx, cell, lambda);
            lcfg.validate()?;
            let truth = analytic_density(mdp, &ctx.target, cell.gamma)?;
            let mut model = ClassifierModel::net(&ctx.env, &cfg.hidden_dims, cfg.learning_rate, &mut rng)?;
            model.target_mode = TargetMode::Polyak(cfg.target_tau);
            let mut target = model.target_copy();
            for step in 1..=lcfg.steps {
                let loss = match method {
                    Method::McC => mc_c_step(&mut model, &ctx.buffer, &lcfg, &mut rng)?,
                    Method::TdC => td_c_step(&mut model, Some(&target), &ctx.buffer, &ctx.target, &lcfg, &mut rng)?,
                    Method::MixedC => {
                        mixed_c_step(&mut model, Some(&target), &ctx.buffer, &ctx.target, &lcfg, &mut rng)?
                    }
                    Method::QHindsight => {
                        q_hindsight_step(&mut model, Some(&target), &ctx.buffer, &ctx.target, &lcfg, &mut rng)?
                    }
                    Method::TabularC | Method::TabularCOpt => unreachable!(),
                };
                model.update_target(&mut target);
                if step % cfg.telemetry_every == 0 || step == lcfg.steps {
                    let (kl, mass_mean) = score(&model, &truth, &ctx.marginal)?;
                    let row = TelemetryRow { step, loss, kl, mass_mean };
                    writer.push(&row)?;
                    telemetry.push(row);
                }
            }
            let last = telemetry.last().expect("final step is always recorded");
            (lcfg.steps, last.kl, last.mass_mean)
        }
    };
    let wall_ms = if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 };
    let row = ResultRow {
        experiment: cfg.name.clone(),
        env: cfg.env.clone(),
        method: cell.method,
        gamma: cell.gamma,
        lambda: cell.lambda,
        seed: ctx.seed,
        step,
        kl,
        mass,
        wall_ms,
    };
    Ok((row, telemetry))
}

fn learner_for(cfg: &ExperimentConfig, ctx: &SeedContext, cell: &Cell, lambda: Option<f64>) -> LearnerConfig {
    let relabel = if cell.method == Method::QHindsight { lambda.unwrap_or(cfg.relabel_ratio) } else { cfg.relabel_ratio };
    let mix = if cell.method == Method::MixedC { lambda.unwrap_or(cfg.mix_ratio) } else { cfg.mix_ratio };
    let mut lcfg = cfg.learner(cell.gamma, relabel, mix, ctx.seed as u64);
    if cfg.uniform_goals {
        lcfg.goal_distribution = Some(ctx.marginal.clone());
    }
    lcfg
}

/// Runs every (cell, seed) pair on the rayon pool. Rows come back sorted
/// by (cell order, seed) regardless of scheduling.
pub fn run_grid(cfg: &ExperimentConfig, cells: &[Cell], telemetry_dir: Option<&Path>) -> Result<SweepResult> {
    let contexts: Vec<SeedContext> =
        (0..cfg.num_seeds).into_par_iter().map(|s| SeedContext::build(cfg, s)).collect::<Result<_>>()?;
    run_grid_with(cfg, cells, &contexts, telemetry_dir)
}

pub fn run_grid_with(
    cfg: &ExperimentConfig,
    cells: &[Cell],
    contexts: &[SeedContext],
    telemetry_dir: Option<&Path>,
) -> Result<SweepResult> {
    let jobs: Vec<(usize, usize)> =
        (0..cells.len()).flat_map(|c| (0..contexts.len()).map(move |s| (c, s))).collect();
    let mut rows: Vec<(usize, usize, ResultRow)> = jobs
        .par_iter()
        .map(|&(c, s)| {
            train_cell(cfg, &contexts[s], &cells[c], telemetry_dir)
                .map(|(row, _)| (c, s, row))
                .map_err(|e| e.context(&format!("cell {} seed {s} of {}", cells[c].key(), cfg.name)))
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|&(c, s, _)| (c, s));
    Ok(SweepResult { rows: rows.into_iter().map(|(_, _, r)| r).collect() })
}

/// Writes `config.json` and `VERSION` into `dir`.
pub fn write_run_header(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    std::fs::write(dir.join("VERSION"), format!("clearn {}\n", crate::VERSION))?;
    Ok(())
}

pub fn write_results(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    result.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn results_path(dir: &Path) -> PathBuf {
    dir.join("results.csv")
}
