//! Exact ground truth: discounted occupancy by a linear solve, forward KL,
//! and fixed-point oracles for relabeled Q-learning on two small chains.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{config_err, Error, Result};
use crate::mdp::{GoalConditionedPolicy, StochasticPolicy, TabularMdp};

const KL_FLOOR: f64 = 1e-12;
const SOLVE_RESIDUAL_TOL: f64 = 1e-9;

/// `p₊(g | s, a)` stored flattened as `[state][action][goal]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedDensity {
    num_states: usize,
    num_actions: usize,
    num_goals: usize,
    probs: Vec<f64>,
}

impl DiscountedDensity {
    pub fn new(num_states: usize, num_actions: usize, num_goals: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions * num_goals {
            return config_err("density table has the wrong size");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return config_err("density entries must be finite and non-negative");
        }
        Ok(DiscountedDensity { num_states, num_actions, num_goals, probs })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_goals(&self) -> usize {
        self.num_goals
    }

    pub fn slice(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_goals;
        &self.probs[start..start + self.num_goals]
    }

    pub fn get(&self, state: usize, action: usize, goal: usize) -> f64 {
        self.slice(state, action)[goal]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.num_goals)
    }

    /// Copy with every (s, a) slice rescaled to sum to one. All-zero slices
    /// become uniform.
    pub fn renormalized(&self) -> Self {
        let mut probs = self.probs.clone();
        let n = self.num_goals as f64;
        for slice in probs.chunks_mut(self.num_goals) {
            let total: f64 = slice.iter().sum();
            if total > 0.0 {
                slice.iter_mut().for_each(|p| *p /= total);
            } else {
                slice.iter_mut().for_each(|p| *p = 1.0 / n);
            }
        }
        DiscountedDensity { probs, ..*self }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "state,action,goal,prob")?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                for (g, p) in self.slice(s, a).iter().enumerate() {
                    writeln!(out, "{s},{a},{g},{p:e}")?;
                }
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "state,action,goal,prob" {
            return Err(Error::Parse(format!("unexpected density header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |e: String| Error::Parse(format!("line {}: {e}", i + 2));
            if parts.len() != 4 {
                return Err(bad("expected 4 fields".into()));
            }
            let idx: Vec<usize> = parts[..3]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(e.to_string()))?;
            let p: f64 = parts[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            rows.push((idx[0], idx[1], idx[2], p));
        }
        let ns = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let na = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let ng = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
        if rows.len() != ns * na * ng {
            return Err(Error::Parse("density rows do not form a full table".into()));
        }
        let mut probs = vec![f64::NAN; ns * na * ng];
        for (s, a, g, p) in rows {
            probs[(s * na + a) * ng + g] = p;
        }
        if probs.iter().any(|p| p.is_nan()) {
            return Err(Error::Parse("duplicate density rows".into()));
        }
        DiscountedDensity::new(ns, na, ng, probs)
    }
}

/// Policy-averaged chain `T` and one-step table `T0` for a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMatrices {
    pub t: DMatrix<f64>,
    /// Rows indexed by `state * num_actions + action`.
    pub t0: DMatrix<f64>,
}

impl OccupancyMatrices {
    pub fn new(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<Self> {
        policy.check_against(mdp)?;
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let t0 = DMatrix::from_fn(ns * na, ns, |sa, next| mdp.prob(sa / na, sa % na, next));
        let t = DMatrix::from_fn(ns, ns, |s, next| {
            (0..na).map(|a| policy.prob(s, a) * mdp.prob(s, a, next)).sum()
        });
        Ok(OccupancyMatrices { t, t0 })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return config_err(format!("discount must lie in [0, 1), got {gamma}"));
    }
    Ok(())
}

/// Solves `X (I − γT) = T0` for `X` by LU on the transposed system.
fn solve_occupancy(m: &OccupancyMatrices, gamma: f64) -> Result<DMatrix<f64>> {
    let n = m.t.nrows();
    let system = DMatrix::<f64>::identity(n, n) - &m.t * gamma;
    let lhs = system.transpose();
    let rhs = m.t0.transpose();
    let x_t = lhs
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("occupancy system is singular".into()))?;
    let residual = (&lhs * &x_t - &rhs).amax();
    if !residual.is_finite() || residual > SOLVE_RESIDUAL_TOL {
        return Err(Error::Numerical(format!("occupancy solve residual {residual:e}")));
    }
    Ok(x_t.transpose())
}

/// `P = (1 − γ) T0 (I − γT)⁻¹`.
pub fn analytic_density(mdp: &TabularMdp, policy: &StochasticPolicy, gamma: f64) -> Result<DiscountedDensity> {
    check_gamma(gamma)?;
    let m = OccupancyMatrices::new(mdp, policy)?;
    let x = solve_occupancy(&m, gamma)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut probs = Vec::with_capacity(ns * na * ns);
    for sa in 0..ns * na {
        for g in 0..ns {
            // LU round-off can leave entries like -1e-17.
            probs.push(((1.0 - gamma) * x[(sa, g)]).max(0.0));
        }
    }
    DiscountedDensity::new(ns, na, ns, probs)
}

/// `V[s][g] = Σ_a π(a|s,g) p₊^{π(·|·,g)}(g | s, a)`: the discounted
/// probability of reaching `g` from `s` while commanded `g`.
pub fn goal_reaching_density(mdp: &TabularMdp, policy: &GoalConditionedPolicy, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let ns = mdp.num_states();
    if policy.num_states() != ns {
        return config_err("goal-conditioned policy does not match the MDP");
    }
    let mut out = vec![0.0; ns * ns];
    for g in 0..ns {
        let pi_g = policy.for_goal(g);
        let density = analytic_density(mdp, &pi_g, gamma)?;
        for s in 0..ns {
            out[s * ns + g] = (0..mdp.num_actions()).map(|a| pi_g.prob(s, a) * density.get(s, a, g)).sum();
        }
    }
    Ok(out)
}

/// Mean over (s, a) of `Σ_g P log(P / Q)`, with `Q` renormalized per slice and
/// floored at 1e-12.
pub fn forward_kl(truth: &DiscountedDensity, estimate: &DiscountedDensity) -> Result<f64> {
    if truth.num_states != estimate.num_states
        || truth.num_actions != estimate.num_actions
        || truth.num_goals != estimate.num_goals
    {
        return config_err("KL operands have different shapes");
    }
    let estimate = estimate.renormalized();
    let mut total = 0.0;
    for (p_slice, q_slice) in truth.slices().zip(estimate.slices()) {
        for (&p, &q) in p_slice.iter().zip(q_slice) {
            if p > 0.0 {
                total += p * (p / q.max(KL_FLOOR)).ln();
            }
        }
    }
    let pairs = (truth.num_states * truth.num_actions) as f64;
    Ok((total / pairs).max(0.0))
}

/// `Σ_g p(g) · embedding(g)`.
pub fn density_to_expected_goal(slice: &[f64], embedding: &[Vec<f64>]) -> Result<Vec<f64>> {
    if slice.len() != embedding.len() {
        return config_err("density slice and embedding differ in length");
    }
    let dim = embedding.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (p, e) in slice.iter().zip(embedding) {
        if e.len() != dim {
            return config_err("embedding vectors differ in dimension");
        }
        for (o, x) in out.iter_mut().zip(e) {
            *o += p * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    pub values: BTreeMap<String, f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl FixedPointReport {
    pub fn get(&self, key: &str) -> f64 {
        self.values[key]
    }
}

pub const FIXED_POINT_TOL: f64 = 1e-12;
const FIXED_POINT_MAX_ITERS: usize = 1_000_000;
const DAMPING: f64 = 0.5;

/// Damped iteration `x ← (1 − d) x + d F(x)` until `‖F(x) − x‖∞ < tol`.
fn damped_fixed_point<F>(mut x: Vec<f64>, map: F) -> Result<(Vec<f64>, usize, f64)>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    for iter in 1..=FIXED_POINT_MAX_ITERS {
        let fx = map(&x);
        let residual = fx.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(Error::Numerical("fixed-point iteration diverged".into()));
        }
        if residual < FIXED_POINT_TOL {
            return Ok((fx, iter, residual));
        }
        for (xi, fi) in x.iter_mut().zip(&fx) {
            *xi = (1.0 - DAMPING) * *xi + DAMPING * fi;
        }
    }
    Err(Error::Numerical(format!(
        "no convergence after {FIXED_POINT_MAX_ITERS} iterations"
    )))
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return config_err(format!("{name} must lie in [0, 1], got {v}"));
    }
    Ok(())
}

/// Relabeled Q-learning on `n` self-looping states: the diagonal entry
/// `Q(s, g = s)` under the two weighting conventions.
///
/// Keys: `q_normalized`, `q_unnormalized`, `normalized_closed_form`,
/// `unnormalized_closed_form`, `alternate_closed_form`, `true_density`.
pub fn example1_fixed_point(n: usize, gamma: f64, lambda: f64) -> Result<FixedPointReport> {
    if n == 0 {
        return config_err("example 1 needs at least one state");
    }
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    let nf = n as f64;
    let w_next = 1.0 - lambda;
    let w_rand = lambda / nf;
    if w_next + w_rand == 0.0 {
        return config_err("lambda = 1 with no next-state weight leaves Q undetermined");
    }
    let (x, iterations, residual) = damped_fixed_point(vec![0.0, 0.0], |q| {
        vec![
            (w_next + w_rand * gamma * q[0]) / (w_next + w_rand),
            w_next + w_rand * gamma * q[1],
        ]
    })?;
    let mut values = BTreeMap::new();
    values.insert("q_normalized".into(), x[0]);
    values.insert("q_unnormalized".into(), x[1]);
    values.insert("normalized_closed_form".into(), w_next / (w_next + w_rand * (1.0 - gamma)));
    values.insert("unnormalized_closed_form".into(), w_next / (1.0 - w_rand * gamma));
    values.insert("alternate_closed_form".into(), (1.0 - gamma) / (1.0 - w_rand * gamma));
    values.insert("true_density".into(), 1.0);
    Ok(FixedPointReport { values, iterations, residual })
}

/// Relabeled Q-learning on the two-state chain `s1 → {s1, s2}`, `s2`
/// absorbing, with goals drawn uniformly.
///
/// Keys: `q11`, `q12`, `q21`, `q22`, `normalized_prediction`,
/// `true_density`, `q11_closed_form`, `q22_closed_form`,
/// `alternate_q22_closed_form`.
pub fn example2_fixed_points(gamma: f64, lambda: f64) -> Result<FixedPointReport> {
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    let next = 1.0 - lambda;
    let half = lambda / 2.0;
    // Per-entry weight on the next-state term and on each random goal.
    let (x, iterations, residual) = damped_fixed_point(vec![0.0; 4], |q| {
        let (q11, q12, q21, q22) = (q[0], q[1], q[2], q[3]);
        let from_s2 = if next + half > 0.0 {
            (next + half * gamma * q22) / (next + half)
        } else {
            0.0
        };
        vec![
            next + half * gamma * (q11 + q21),
            next + half * gamma * (q12 + q22),
            gamma * q21,
            from_s2,
        ]
    })?;
    let mut values = BTreeMap::new();
    values.insert("q11".into(), x[0]);
    values.insert("q12".into(), x[1]);
    values.insert("q21".into(), x[2]);
    values.insert("q22".into(), x[3]);
    let total = x[0] + x[1];
    values.insert("normalized_prediction".into(), if total > 0.0 { x[0] / total } else { f64::NAN });
    values.insert("true_density".into(), (2.0 - 2.0 * gamma) / (2.0 - gamma));
    values.insert("q11_closed_form".into(), (2.0 - 2.0 * lambda) / (2.0 - gamma * lambda));
    values.insert("q22_closed_form".into(), (2.0 - 2.0 * lambda) / (2.0 - lambda - gamma * lambda));
    values.insert("alternate_q22_closed_form".into(), (2.0 - 2.0 * lambda) / (2.0 - lambda + gamma * lambda));
    Ok(FixedPointReport { values, iterations, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn self_loop(n: usize) -> TabularMdp {
        TabularMdp::deterministic(n, 2, |s, a| (s + a) % n, vec![1.0 / n as f64; n]).unwrap()
    }

    #[test]
    fn deterministic_successor_is_absorbing_indicator() {
        let mdp = TabularMdp::deterministic(3, 1, |s, _| s, vec![1.0, 0.0, 0.0]).unwrap();
        let p = analytic_density(&mdp, &StochasticPolicy::uniform(3, 1), 0.9).unwrap();
        for s in 0..3 {
            for g in 0..3 {
                let want = if g == s { 1.0 } else { 0.0 };
                assert!((p.get(s, 0, g) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slices_normalize_across_discounts() {
        let mdp = self_loop(4);
        let policy = StochasticPolicy::new(4, 2, vec![0.3, 0.7, 0.5, 0.5, 1.0, 0.0, 0.1, 0.9]).unwrap();
        for gamma in [0.0, 0.3, 0.5, 0.9, 0.99] {
            let p = analytic_density(&mdp, &policy, gamma).unwrap();
            for slice in p.slices() {
                assert!((slice.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(analytic_density(&mdp, &policy, 1.0).is_err());
    }

    #[test]
    fn kl_of_point_mass_against_uniform() {
        let mut truth = vec![0.0; 25];
        truth[7] = 1.0;
        let p = DiscountedDensity::new(1, 1, 25, truth).unwrap();
        let q = DiscountedDensity::new(1, 1, 25, vec![1.0 / 25.0; 25]).unwrap();
        assert!((forward_kl(&p, &q).unwrap() - 25f64.ln()).abs() < 1e-12);
        assert!(forward_kl(&p, &p).unwrap().abs() < 1e-12);
        let other = DiscountedDensity::new(1, 1, 5, vec![0.2; 5]).unwrap();
        assert!(forward_kl(&p, &other).is_err());
    }

    #[test]
    fn expected_goal_of_uniform_grid_is_center() {
        let embedding: Vec<Vec<f64>> = (0..25).map(|i| vec![(i % 5) as f64, (i / 5) as f64]).collect();
        let c = density_to_expected_goal(&[1.0 / 25.0; 25], &embedding).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
        let mut point = [0.0; 25];
        point[13] = 1.0;
        assert_eq!(density_to_expected_goal(&point, &embedding).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn example1_limits() {
        let r = example1_fixed_point(5, 0.9, 0.0).unwrap();
        assert!((r.get("q_normalized") - 1.0).abs() < 1e-12);
        for lambda in [0.1, 0.5, 0.9] {
            let r = example1_fixed_point(5, 0.0, lambda).unwrap();
            let want = (1.0 - lambda) / (1.0 - lambda + lambda / 5.0);
            assert!((r.get("q_normalized") - want).abs() < 1e-11);
        }
        let r = example1_fixed_point(5, 0.9, 0.5).unwrap();
        assert!(r.residual < FIXED_POINT_TOL);
        assert!((r.get("q_normalized") - r.get("normalized_closed_form")).abs() < 1e-11);
        assert!((r.get("q_unnormalized") - r.get("unnormalized_closed_form")).abs() < 1e-11);
        assert!(r.get("q_normalized") < 1.0);
    }

    #[test]
    fn example2_limits() {
        let r = example2_fixed_points(0.9, 0.5).unwrap();
        assert_eq!(r.get("q21"), 0.0);
        assert!((r.get("q11") - r.get("q11_closed_form")).abs() < 1e-11);
        assert!((r.get("q22") - r.get("q22_closed_form")).abs() < 1e-11);
        assert!((r.get("q22") - r.get("alternate_q22_closed_form")).abs() > 1e-3);
        assert!((r.get("true_density") - 2.0 / 11.0).abs() < 1e-15);
        let r = example2_fixed_points(0.9, 0.0).unwrap();
        for key in ["q11", "q12", "q22"] {
            assert!((r.get(key) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn density_csv_round_trip() {
        let mdp = self_loop(3);
        let p = analytic_density(&mdp, &StochasticPolicy::uniform(3, 2), 0.7).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = DiscountedDensity::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }
}
