//! Exact tabular operators: the C-learning assignment and optimality
//! equations, expected per-entry updates of the sampled learners, and
//! goal-conditioned policy improvement.

use super::{ClassifierModel, LossKind, QTable, RatioTable};
use crate::error::{config_err, Error, Result};
use crate::mdp::{ActionSource, GoalConditionedPolicy, TabularMdp};

/// Relative tolerance under which two action values count as tied.
pub const TIE_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 1_000_000;

/// Lowest index whose value is within `TIE_TOL` of the maximum.
pub fn greedy_action(values: &[f64]) -> usize {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOL * best.abs().max(1.0);
    values.iter().position(|&v| v >= best - tol).unwrap_or(0)
}

fn check_marginal(mdp: &TabularMdp, marginal: &[f64]) -> Result<()> {
    if marginal.len() != mdp.num_states() {
        return config_err("marginal length must equal the number of states");
    }
    if let Some(g) = marginal.iter().position(|&m| !(m > 0.0)) {
        return config_err(format!("marginal has no mass on state {g}"));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return config_err(format!("gamma must lie in [0, 1), got {gamma}"));
    }
    Ok(())
}

/// `ratio'(s,a,g) = (1−γ) p(g|s,a) / m(g) + γ Σ_{s'} p(s'|s,a) V(s', g)`.
fn bellman_sweep(mdp: &TabularMdp, marginal: &[f64], gamma: f64, v_next: &[f64]) -> RatioTable {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut out = RatioTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.row(s, a);
            for g in 0..ns {
                let mut acc = (1.0 - gamma) * row[g] / marginal[g];
                for (s2, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        acc += gamma * p * v_next[s2 * ns + g];
                    }
                }
                out.ratio[(s * na + a) * ns + g] = acc;
            }
        }
    }
    out
}

/// One application of the policy-evaluation assignment equation.
pub fn assignment_sweep(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    gamma: f64,
    ratio: &RatioTable,
) -> RatioTable {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut v = vec![0.0; ns * ns];
    for s2 in 0..ns {
        for g in 0..ns {
            v[s2 * ns + g] = (0..na).map(|a2| policy.action_prob(s2, g, a2) * ratio.get(s2, a2, g)).sum();
        }
    }
    bellman_sweep(mdp, marginal, gamma, &v)
}

/// One application of the optimality equation (max over next actions).
pub fn optimality_sweep(mdp: &TabularMdp, marginal: &[f64], gamma: f64, ratio: &RatioTable) -> RatioTable {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut v = vec![0.0; ns * ns];
    for s2 in 0..ns {
        for g in 0..ns {
            v[s2 * ns + g] = (0..na).map(|a2| ratio.get(s2, a2, g)).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    bellman_sweep(mdp, marginal, gamma, &v)
}

fn iterate<F>(start: RatioTable, tol: f64, sweep: F) -> Result<RatioTable>
where
    F: Fn(&RatioTable) -> RatioTable,
{
    if !(tol > 0.0) {
        return config_err("tolerance must be positive");
    }
    let mut current = start;
    for _ in 0..MAX_SWEEPS {
        let next = sweep(&current);
        let delta = next.sup_distance(&current);
        if !delta.is_finite() {
            return Err(Error::Numerical("ratio iteration diverged".into()));
        }
        let scale = next.ratio.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        current = next;
        if delta < tol * scale {
            return Ok(current);
        }
    }
    Err(Error::Numerical(format!("no convergence after {MAX_SWEEPS} sweeps")))
}

/// Iterates [`assignment_sweep`] from zero until the sup-norm change drops
/// below `tol` times `max(1, sup |ratio|)`.
pub fn tabular_c_value_iteration(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    gamma: f64,
    tol: f64,
) -> Result<RatioTable> {
    check_gamma(gamma)?;
    check_marginal(mdp, marginal)?;
    if policy.num_actions() != mdp.num_actions() {
        return config_err("policy and MDP disagree on the number of actions");
    }
    let start = RatioTable::zeros(mdp.num_states(), mdp.num_actions());
    iterate(start, tol, |r| assignment_sweep(mdp, policy, marginal, gamma, r))
}

/// Optimality iteration plus the greedy goal-conditioned policy.
pub fn tabular_c_optimality_iteration(
    mdp: &TabularMdp,
    marginal: &[f64],
    gamma: f64,
    tol: f64,
) -> Result<(RatioTable, GoalConditionedPolicy)> {
    check_gamma(gamma)?;
    check_marginal(mdp, marginal)?;
    let start = RatioTable::zeros(mdp.num_states(), mdp.num_actions());
    let ratio = iterate(start, tol, |r| optimality_sweep(mdp, marginal, gamma, r))?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut actions = Vec::with_capacity(ns * ns);
    for s in 0..ns {
        for g in 0..ns {
            let values: Vec<f64> = (0..na).map(|a| ratio.get(s, a, g)).collect();
            actions.push(greedy_action(&values));
        }
    }
    Ok((ratio, GoalConditionedPolicy::from_actions(ns, na, &actions)))
}

/// Minimizer of the expected two-term TD loss for every entry, built from
/// the same (label, weight) pairs the sampled learner uses, returned as
/// odds. `w_clip = None` leaves importance weights unclipped.
pub fn expected_td_update(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    gamma: f64,
    w_clip: Option<f64>,
    current: &RatioTable,
) -> RatioTable {
    expected_mixed_inner(mdp, policy, marginal, None, gamma, 1.0, w_clip, current)
}

/// Expected mixed TD/MC update. `future` is the empirical hindsight
/// distribution `[s][a][g]` (see `ReplayBuffer::empirical_future`).
#[allow(clippy::too_many_arguments)]
pub fn expected_mixed_update(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    future: &[f64],
    gamma: f64,
    mix_ratio: f64,
    w_clip: Option<f64>,
    current: &RatioTable,
) -> RatioTable {
    expected_mixed_inner(mdp, policy, marginal, Some(future), gamma, mix_ratio, w_clip, current)
}

#[allow(clippy::too_many_arguments)]
fn expected_mixed_inner(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    future: Option<&[f64]>,
    gamma: f64,
    lambda: f64,
    w_clip: Option<f64>,
    current: &RatioTable,
) -> RatioTable {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let clip = w_clip.unwrap_or(f64::INFINITY);
    let mut out = RatioTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.row(s, a);
            for g in 0..ns {
                let sa_g = (s * na + a) * ns + g;
                // Label-1 and label-0 mass kept apart so the odds need no
                // subtraction. Half-batch next-state and future positives:
                let mut labelled = 0.5 * lambda * (1.0 - gamma) * row[g];
                let mut unlabelled = 0.0;
                if let Some(f) = future {
                    labelled += 0.5 * (1.0 - lambda) * f[sa_g];
                }
                // Half-batch marginal goals.
                for (s2, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for a2 in 0..na {
                        let prob = p * policy.action_prob(s2, g, a2);
                        if prob == 0.0 {
                            continue;
                        }
                        let lw = lambda * gamma * current.get(s2, a2, g).min(clip);
                        let weight = 0.5 * marginal[g] * prob * (1.0 + lw);
                        labelled += weight * (lw / (1.0 + lw));
                        unlabelled += weight * (1.0 / (1.0 + lw));
                    }
                }
                out.ratio[sa_g] = labelled / unlabelled;
            }
        }
    }
    out
}

/// Expected Monte Carlo update: future positives against marginal
/// negatives, `F / m` as odds.
pub fn expected_mc_update(num_states: usize, num_actions: usize, future: &[f64], marginal: &[f64]) -> RatioTable {
    let mut out = RatioTable::zeros(num_states, num_actions);
    for (i, r) in out.ratio.iter_mut().enumerate() {
        *r = (0.5 * future[i]) / (0.5 * marginal[i % num_states]);
    }
    out
}

/// Expected relabeled Q-learning update: the weighted mean of label 1
/// (weight `(1−λ) p(g|s,a)`) and `clamp(γ Q(s', a', g))` (weight
/// `λ m(g)`). Entries with no weight keep their value.
pub fn expected_q_update(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    gamma: f64,
    lambda: f64,
    current: &QTable,
) -> QTable {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut out = current.clone();
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.row(s, a);
            for g in 0..ns {
                let w_next = (1.0 - lambda) * row[g];
                let w_rand = lambda * marginal[g];
                if w_next + w_rand == 0.0 {
                    continue;
                }
                let mut target = 0.0;
                for (s2, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        for a2 in 0..na {
                            target += p * policy.action_prob(s2, g, a2) * (gamma * current.get(s2, a2, g)).clamp(0.0, 1.0);
                        }
                    }
                }
                out.q[(s * na + a) * ns + g] = (w_next + w_rand * target) / (w_next + w_rand);
            }
        }
    }
    out
}

/// Fixed point of [`expected_q_update`] from `Q = 0`.
pub fn tabular_q_fixed_point(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    gamma: f64,
    lambda: f64,
    tol: f64,
) -> Result<QTable> {
    check_gamma(gamma)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut q = QTable { num_states: ns, num_actions: na, q: vec![0.0; ns * na * ns] };
    for _ in 0..MAX_SWEEPS {
        let next = expected_q_update(mdp, policy, marginal, gamma, lambda, &q);
        let delta = next.q.iter().zip(&q.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if delta < tol {
            return Ok(q);
        }
    }
    Err(Error::Numerical("Q iteration did not converge".into()))
}

/// Minimizes `Σ_k W_k ℓ(c, y_k)` over `c ∈ (0, 1)` by bisection on the
/// derivative.
fn minimize_entry(terms: &[(f64, f64)], loss: LossKind) -> f64 {
    let derivative = |c: f64| -> f64 {
        terms
            .iter()
            .map(|&(w, y)| match loss {
                LossKind::CrossEntropy => w * (-y / c + (1.0 - y) / (1.0 - c)),
                LossKind::SquaredError => 2.0 * w * (c - y),
            })
            .sum()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if derivative(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fixed point of TD C-learning when each entry is set to the minimizer of
/// its expected loss, written with three separate terms: `(1, 1−γ)` on the
/// next state, `(0, 1)` on marginal goals, `(1, γw)` on marginal goals.
pub fn loss_fixed_point(
    mdp: &TabularMdp,
    policy: &impl ActionSource,
    marginal: &[f64],
    gamma: f64,
    loss: LossKind,
    tol: f64,
) -> Result<RatioTable> {
    check_gamma(gamma)?;
    check_marginal(mdp, marginal)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    iterate(RatioTable::zeros(ns, na), tol, |current| {
        let mut out = RatioTable::zeros(ns, na);
        for s in 0..ns {
            for a in 0..na {
                let row = mdp.row(s, a);
                for g in 0..ns {
                    let mut expected_w = 0.0;
                    for (s2, &p) in row.iter().enumerate() {
                        if p > 0.0 {
                            for a2 in 0..na {
                                expected_w += p * policy.action_prob(s2, g, a2) * current.get(s2, a2, g);
                            }
                        }
                    }
                    let terms = [
                        ((1.0 - gamma) * row[g], 1.0),
                        (marginal[g], 0.0),
                        (marginal[g] * gamma * expected_w, 1.0),
                    ];
                    let c = minimize_entry(&terms, loss);
                    out.ratio[(s * na + a) * ns + g] = c / (1.0 - c);
                }
            }
        }
        out
    })
}

/// Greedy improvement: for each listed `(s, g)`, the action maximizing
/// `C(F = 1 | s, a, g)` (lowest index among ties).
pub fn gc_policy_improvement_step(
    policy: &GoalConditionedPolicy,
    model: &ClassifierModel,
    states: &[usize],
    goals: &[usize],
) -> Result<GoalConditionedPolicy> {
    let na = model.num_actions();
    if policy.num_states() != model.num_states() {
        return config_err("policy and classifier cover different state spaces");
    }
    let mut out = policy.clone();
    for &s in states {
        for &g in goals {
            let values = (0..na).map(|a| model.predict(s, a, g)).collect::<Result<Vec<_>>>()?;
            let best = greedy_action(&values);
            let mut row = vec![0.0; na];
            row[best] = 1.0;
            out.set_row(s, g, &row);
        }
    }
    Ok(out)
}

/// Record of alternating evaluation and greedy improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyIterationTrace {
    /// The starting policy followed by each improved policy.
    pub policies: Vec<GoalConditionedPolicy>,
    /// Ratio of the final policy.
    pub ratio: RatioTable,
    pub stable: bool,
}

/// Alternates policy evaluation by repeated expected TD updates with greedy
/// improvement until the argmax table stops changing.
pub fn gc_policy_iteration(
    mdp: &TabularMdp,
    start: GoalConditionedPolicy,
    marginal: &[f64],
    gamma: f64,
    tol: f64,
    max_rounds: usize,
) -> Result<PolicyIterationTrace> {
    check_gamma(gamma)?;
    check_marginal(mdp, marginal)?;
    let ns = mdp.num_states();
    let all: Vec<usize> = (0..ns).collect();
    let mut policies = vec![start];
    let mut ratio = RatioTable::zeros(ns, mdp.num_actions());
    for _ in 0..max_rounds {
        let policy = policies.last().unwrap();
        ratio = iterate(ratio, tol, |r| expected_td_update(mdp, policy, marginal, gamma, None, r))?;
        let model = ClassifierModel::from_ratio(&ratio);
        let improved = gc_policy_improvement_step(policy, &model, &all, &all)?;
        if improved == *policy {
            return Ok(PolicyIterationTrace { policies, ratio, stable: true });
        }
        policies.push(improved);
    }
    Ok(PolicyIterationTrace { policies, ratio, stable: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::analytic_density;
    use crate::mdp::StochasticPolicy;

    #[test]
    fn self_loop_ratio_is_state_count() {
        let n = 4;
        let mdp = TabularMdp::deterministic(n, 1, |s, _| s, vec![0.25; 4]).unwrap();
        let m = vec![0.25; 4];
        let r = tabular_c_value_iteration(&mdp, &StochasticPolicy::uniform(n, 1), &m, 0.9, 1e-13).unwrap();
        for s in 0..n {
            for g in 0..n {
                let want = if s == g { n as f64 } else { 0.0 };
                assert!((r.get(s, 0, g) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_marginal_rejected() {
        let mdp = TabularMdp::deterministic(2, 1, |s, _| s, vec![0.5, 0.5]).unwrap();
        let p = StochasticPolicy::uniform(2, 1);
        assert!(tabular_c_value_iteration(&mdp, &p, &[1.0, 0.0], 0.5, 1e-10).is_err());
    }

    #[test]
    fn single_action_optimality_equals_evaluation() {
        let mdp = TabularMdp::new(3, 1, vec![0.2, 0.3, 0.5, 0.0, 0.5, 0.5, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0])
            .unwrap();
        let m = [0.3, 0.3, 0.4];
        let eval = tabular_c_value_iteration(&mdp, &StochasticPolicy::uniform(3, 1), &m, 0.8, 1e-13).unwrap();
        let (opt, _) = tabular_c_optimality_iteration(&mdp, &m, 0.8, 1e-13).unwrap();
        assert!(eval.sup_distance(&opt) < 1e-11);
    }

    #[test]
    fn self_loop_action_reaches_inverse_marginal() {
        // Action 0 stays, action 1 swaps.
        let mdp = TabularMdp::deterministic(2, 2, |s, a| if a == 0 { s } else { 1 - s }, vec![0.5, 0.5]).unwrap();
        let m = [0.3, 0.7];
        let (r, policy) = tabular_c_optimality_iteration(&mdp, &m, 0.9, 1e-14).unwrap();
        for s in 0..2 {
            assert!((r.get(s, 0, s) - 1.0 / m[s]).abs() < 1e-9);
            assert_eq!(policy.row(s, s), &[1.0, 0.0]);
            assert_eq!(policy.row(s, 1 - s), &[0.0, 1.0]);
        }
    }

    #[test]
    fn q_fixed_point_matches_chain_oracle() {
        let mdp = crate::envs::make_example2();
        let p = StochasticPolicy::uniform(2, 1);
        let q = tabular_q_fixed_point(&mdp, &p, &[0.5, 0.5], 0.9, 0.5, 1e-14).unwrap();
        let oracle = crate::analytic::example2_fixed_points(0.9, 0.5).unwrap();
        assert!((q.get(0, 0, 0) - oracle.get("q11")).abs() < 1e-10);
        assert!((q.get(0, 0, 1) - oracle.get("q12")).abs() < 1e-10);
        assert!((q.get(1, 0, 0) - oracle.get("q21")).abs() < 1e-10);
        assert!((q.get(1, 0, 1) - oracle.get("q22")).abs() < 1e-10);
    }

    #[test]
    fn mc_expectation_on_analytic_future_recovers_density() {
        let mdp = TabularMdp::new(2, 1, vec![0.4, 0.6, 0.7, 0.3], vec![1.0, 0.0]).unwrap();
        let p = StochasticPolicy::uniform(2, 1);
        let truth = analytic_density(&mdp, &p, 0.6).unwrap();
        let m = [0.45, 0.55];
        let r = expected_mc_update(2, 1, truth.as_slice(), &m);
        let back = r.density(&m).unwrap();
        for (a, b) in back.as_slice().iter().zip(truth.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
