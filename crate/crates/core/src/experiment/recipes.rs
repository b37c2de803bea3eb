use std::path::Path;

use super::config::{ExperimentConfig, Method, Recipe, DEFAULT_GAMMA_GRID, DEFAULT_LAMBDA_GRID, NORMALIZATION_LAMBDA_GRID};
use super::run::{run_grid, Cell, ResultRow, SeedContext, SweepResult};
use crate::analytic::goal_reaching_density;
use crate::error::Result;
use crate::learners::{gc_policy_iteration, normalization_mass, tabular_c_optimality_iteration, ClassifierModel};
use crate::mdp::GoalConditionedPolicy;

/// A named pass/fail check with a human-readable detail line.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Gate {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Gate { name: name.into(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeOutcome {
    pub result: SweepResult,
    pub gates: Vec<Gate>,
}

impl RecipeOutcome {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }
}

pub fn run_recipe(recipe: Recipe, cfg: &ExperimentConfig, telemetry: Option<&Path>) -> Result<RecipeOutcome> {
    match recipe {
        Recipe::OnpolicyKl => run_onpolicy_kl(cfg, telemetry),
        Recipe::OffpolicyKl => run_offpolicy_kl(cfg, telemetry),
        Recipe::Normalization => run_normalization(cfg, telemetry),
        Recipe::LambdaSweep => run_lambda_sweep(cfg, telemetry),
        Recipe::GcrlTabular => run_gcrl_tabular(cfg),
    }
}

/// A single method at the configured gamma and ratio.
pub fn run_single(cfg: &ExperimentConfig, telemetry: Option<&Path>) -> Result<RecipeOutcome> {
    let lambda = match cfg.method {
        Method::QHindsight => Some(cfg.relabel_ratio),
        Method::MixedC => Some(cfg.mix_ratio),
        _ => None,
    };
    let result = run_grid(cfg, &[Cell::new(cfg.method, cfg.gamma, lambda)], telemetry)?;
    Ok(RecipeOutcome { result, gates: Vec::new() })
}

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

/// MC, TD and Q-learning (at `relabel_ratio`) on the behavior policy's own
/// data, plus the exact tabular solution.
pub fn run_onpolicy_kl(cfg: &ExperimentConfig, telemetry: Option<&Path>) -> Result<RecipeOutcome> {
    let cfg = ExperimentConfig { off_policy: false, ..cfg.clone() };
    let g = cfg.gamma;
    let lq = Some(cfg.relabel_ratio);
    let cells = [
        Cell::new(Method::McC, g, None),
        Cell::new(Method::TdC, g, None),
        Cell::new(Method::QHindsight, g, lq),
        Cell::new(Method::TabularC, g, None),
    ];
    let result = run_grid(&cfg, &cells, telemetry)?;
    let mc = result.median_kl(Method::McC, g, None);
    let td = result.median_kl(Method::TdC, g, None);
    let q = result.median_kl(Method::QHindsight, g, lq);
    let tab = result.median_kl(Method::TabularC, g, None);
    let gates = vec![
        Gate::new("on-policy mc-c below q-hindsight", mc < q, format!("{} < {} (q/mc ratio {})", fmt(mc), fmt(q), fmt(q / mc))),
        Gate::new("on-policy td-c below q-hindsight", td < q, format!("{} < {} (q/td ratio {})", fmt(td), fmt(q), fmt(q / td))),
        Gate::new("tabular-c exact", tab < 1e-6, format!("median KL {tab:e} < 1e-6")),
    ];
    Ok(RecipeOutcome { result, gates })
}

/// Distinct behavior and target policies; Q-learning over the λ grid.
pub fn run_offpolicy_kl(cfg: &ExperimentConfig, telemetry: Option<&Path>) -> Result<RecipeOutcome> {
    let cfg = ExperimentConfig { off_policy: true, ..cfg.clone() };
    let g = cfg.gamma;
    let grid = cfg.lambda_grid_or(&DEFAULT_LAMBDA_GRID);
    let mut cells = vec![Cell::new(Method::McC, g, None), Cell::new(Method::TdC, g, None)];
    cells.extend(grid.iter().map(|&l| Cell::new(Method::QHindsight, g, Some(l))));
    let result = run_grid(&cfg, &cells, telemetry)?;
    let mc = result.median_kl(Method::McC, g, None);
    let td = result.median_kl(Method::TdC, g, None);
    let (best_l, best_q) = best_lambda(&result, g, &grid);
    let gates = vec![
        Gate::new("off-policy td-c below mc-c", td < mc, format!("{} < {}", fmt(td), fmt(mc))),
        Gate::new(
            "off-policy td-c below best q-hindsight",
            td < best_q,
            format!("{} < {} at lambda {best_l} (td is {}% lower)", fmt(td), fmt(best_q), fmt(100.0 * (1.0 - td / best_q))),
        ),
    ];
    Ok(RecipeOutcome { result, gates })
}

fn best_lambda(result: &SweepResult, gamma: f64, grid: &[f64]) -> (f64, f64) {
    grid.iter()
        .map(|&l| (l, result.median_kl(Method::QHindsight, gamma, Some(l))))
        .fold((f64::NAN, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Mass of the unnormalized density read-out for MC C-learning and
/// Q-learning over the λ grid, with the wider hidden layer.
pub fn run_normalization(cfg: &ExperimentConfig, telemetry: Option<&Path>) -> Result<RecipeOutcome> {
    let mut cfg = ExperimentConfig { off_policy: false, ..cfg.clone() };
    if cfg.hidden_dims == [32] {
        cfg.hidden_dims = vec![256];
    }
    let g = cfg.gamma;
    let grid = cfg.lambda_grid_or(&NORMALIZATION_LAMBDA_GRID);
    let mut cells = vec![Cell::new(Method::McC, g, None)];
    cells.extend(grid.iter().map(|&l| Cell::new(Method::QHindsight, g, Some(l))));
    let result = run_grid(&cfg, &cells, telemetry)?;
    let c_mass = result.median_mass(Method::McC, g, None);
    let mut gates =
        vec![Gate::new("c-learning mass near one", (0.9..=1.1).contains(&c_mass), format!("median {} in [0.9, 1.1]", fmt(c_mass)))];
    for &l in grid.iter().filter(|&&l| l >= 0.5) {
        let q_mass = result.median_mass(Method::QHindsight, g, Some(l));
        gates.push(Gate::new(
            format!("q-hindsight mass below c-learning at lambda {l}"),
            q_mass < c_mass,
            format!("{} < {}", fmt(q_mass), fmt(c_mass)),
        ));
    }
    Ok(RecipeOutcome { result, gates })
}

/// Q-learning KL across λ for each γ, against TD C-learning.
pub fn run_lambda_sweep(cfg: &ExperimentConfig, telemetry: Option<&Path>) -> Result<RecipeOutcome> {
    let cfg = ExperimentConfig { off_policy: false, ..cfg.clone() };
    let gammas = cfg.gamma_grid_or(&DEFAULT_GAMMA_GRID);
    let grid = cfg.lambda_grid_or(&DEFAULT_LAMBDA_GRID);
    let mut cells = Vec::new();
    for &g in &gammas {
        cells.push(Cell::new(Method::TdC, g, None));
        cells.extend(grid.iter().map(|&l| Cell::new(Method::QHindsight, g, Some(l))));
    }
    let result = run_grid(&cfg, &cells, telemetry)?;
    let mut gates = Vec::new();
    for &g in &gammas {
        let predicted = (1.0 + g) / 2.0;
        let (best_l, best_q) = best_lambda(&result, g, &grid);
        gates.push(Gate::new(
            format!("best lambda near (1+gamma)/2 at gamma {g}"),
            (best_l - predicted).abs() <= 0.1 + 1e-12,
            format!("argmin {best_l}, predicted {predicted}"),
        ));
        let td = result.median_kl(Method::TdC, g, None);
        gates.push(Gate::new(
            format!("td-c at most best q-hindsight at gamma {g}"),
            td <= best_q,
            format!("{} <= {}", fmt(td), fmt(best_q)),
        ));
    }
    Ok(RecipeOutcome { result, gates })
}

/// Per-seed outcome of tabular goal-conditioned policy iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GcrlSeedReport {
    pub rounds: usize,
    pub stable: bool,
    pub argmax_matches: bool,
    /// Largest `|p₊(g|s,g) − optimum|` over (s, g).
    pub density_gap: f64,
    /// Most negative per-(s, g) change across improvement steps.
    pub worst_step_change: f64,
    pub mean_mass: f64,
}

pub fn gcrl_seed(ctx: &SeedContext, gamma: f64) -> Result<GcrlSeedReport> {
    let mdp = ctx.env.mdp();
    let marginal = ctx.tabular_marginal();
    let start = GoalConditionedPolicy::from_markov(&ctx.behavior);
    let trace = gc_policy_iteration(mdp, start, &marginal, gamma, 1e-13, 200)?;
    let (opt_ratio, opt_policy) = tabular_c_optimality_iteration(mdp, &marginal, gamma, 1e-13)?;
    let final_policy = trace.policies.last().unwrap();
    let ns = mdp.num_states();
    let mut worst = f64::INFINITY;
    let mut prev = goal_reaching_density(mdp, &trace.policies[0], gamma)?;
    for p in &trace.policies[1..] {
        let cur = goal_reaching_density(mdp, p, gamma)?;
        for (a, b) in cur.iter().zip(&prev) {
            worst = worst.min(a - b);
        }
        prev = cur;
    }
    let mut gap = 0.0f64;
    for s in 0..ns {
        for g in 0..ns {
            let best = (0..mdp.num_actions()).map(|a| opt_ratio.get(s, a, g)).fold(f64::NEG_INFINITY, f64::max);
            gap = gap.max((prev[s * ns + g] - best * marginal[g]).abs());
        }
    }
    let masses = normalization_mass(&ClassifierModel::from_ratio(&trace.ratio), &marginal)?;
    Ok(GcrlSeedReport {
        rounds: trace.policies.len() - 1,
        stable: trace.stable,
        argmax_matches: final_policy.argmax_table() == opt_policy.argmax_table(),
        density_gap: gap,
        worst_step_change: if worst.is_finite() { worst } else { 0.0 },
        mean_mass: masses.iter().sum::<f64>() / masses.len() as f64,
    })
}

/// Alternates exact TD evaluation with greedy improvement and compares
/// against the optimality equation.
pub fn run_gcrl_tabular(cfg: &ExperimentConfig) -> Result<RecipeOutcome> {
    use rayon::prelude::*;
    let reports: Vec<(usize, GcrlSeedReport)> = (0..cfg.num_seeds)
        .into_par_iter()
        .map(|s| {
            let ctx = SeedContext::build(cfg, s)?;
            Ok((s, gcrl_seed(&ctx, cfg.gamma)?))
        })
        .collect::<Result<_>>()?;
    let rows = reports
        .iter()
        .map(|(s, r)| ResultRow {
            experiment: cfg.name.clone(),
            env: cfg.env.clone(),
            method: Method::TabularCOpt,
            gamma: cfg.gamma,
            lambda: None,
            seed: *s,
            step: r.rounds,
            kl: r.density_gap,
            mass: r.mean_mass,
            wall_ms: 0,
        })
        .collect();
    let all = |f: &dyn Fn(&GcrlSeedReport) -> bool| reports.iter().all(|(_, r)| f(r));
    let max_gap = reports.iter().map(|(_, r)| r.density_gap).fold(0.0, f64::max);
    let worst = reports.iter().map(|(_, r)| r.worst_step_change).fold(f64::INFINITY, f64::min);
    let gates = vec![
        Gate::new("policy iteration stabilizes", all(&|r| r.stable), format!("rounds {:?}", reports.iter().map(|(_, r)| r.rounds).collect::<Vec<_>>())),
        Gate::new("argmax table equals optimality iteration", all(&|r| r.argmax_matches), "all seeds"),
        Gate::new("goal-reaching density optimal", max_gap < 1e-6, format!("max gap {max_gap:e} < 1e-6")),
        Gate::new("improvement steps monotone", worst >= -1e-9, format!("worst change {worst:e} >= -1e-9")),
    ];
    Ok(RecipeOutcome { result: SweepResult { rows }, gates })
}
