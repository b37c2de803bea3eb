//! Finite controlled Markov processes, tabular policies, trajectory
//! simulation and the replay buffer with its hindsight samplers.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{config_err, Error, Result};

const ROW_TOL: f64 = 1e-12;

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return config_err(format!("{what}: entries must lie in [0, 1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return config_err(format!("{what}: row sums to {sum}, expected 1"));
    }
    Ok(())
}

/// Draws an index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1: fall back to the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// A finite controlled Markov process `p(s' | s, a)` with initial
/// distribution `p1(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Flattened `[state][action][next_state]`.
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return config_err("an MDP needs at least one state and one action");
        }
        if transition.len() != num_states * num_actions * num_states {
            return config_err(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            ));
        }
        if initial_dist.len() != num_states {
            return config_err("initial distribution length must equal num_states");
        }
        for (i, row) in transition.chunks(num_states).enumerate() {
            check_distribution(row, &format!("transition row (s={}, a={})", i / num_actions, i % num_actions))?;
        }
        check_distribution(&initial_dist, "initial distribution")?;
        Ok(TabularMdp { num_states, num_actions, transition, initial_dist })
    }

    /// Builds an MDP from a deterministic transition function.
    pub fn deterministic(
        num_states: usize,
        num_actions: usize,
        step: impl Fn(usize, usize) -> usize,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mut transition = vec![0.0; num_states * num_actions * num_states];
        for s in 0..num_states {
            for a in 0..num_actions {
                let next = step(s, a);
                if next >= num_states {
                    return config_err(format!("step({s}, {a}) = {next} is out of range"));
                }
                transition[(s * num_actions + a) * num_states + next] = 1.0;
            }
        }
        Self::new(num_states, num_actions, transition, initial_dist)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `p(· | s, a)`.
    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn prob(&self, state: usize, action: usize, next_state: usize) -> f64 {
        self.row(state, action)[next_state]
    }

    pub fn step<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(state, action), rng)
    }
}

/// Anything that can choose an action, optionally conditioned on a goal.
pub trait ActionSource {
    fn action_prob(&self, state: usize, goal: usize, action: usize) -> f64;
    fn sample_action<R: Rng + ?Sized>(&self, state: usize, goal: usize, rng: &mut R) -> usize;
    fn num_actions(&self) -> usize;
}

/// Markovian policy `π(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return config_err("policy table has the wrong size");
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(StochasticPolicy { num_states, num_actions, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        StochasticPolicy {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return config_err(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.num_states,
                self.num_actions,
                mdp.num_states(),
                mdp.num_actions()
            ));
        }
        Ok(())
    }
}

impl ActionSource for StochasticPolicy {
    fn action_prob(&self, state: usize, _goal: usize, action: usize) -> f64 {
        self.prob(state, action)
    }

    fn sample_action<R: Rng + ?Sized>(&self, state: usize, _goal: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(state), rng)
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// Goal-conditioned policy `π(a | s, g)`, stored `[state][goal][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalConditionedPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl GoalConditionedPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_states * num_actions {
            return config_err("goal-conditioned policy table has the wrong size");
        }
        for (i, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, &format!("policy row (s={}, g={})", i / num_states, i % num_states))?;
        }
        Ok(GoalConditionedPolicy { num_states, num_actions, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        GoalConditionedPolicy {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_states * num_actions],
        }
    }

    /// The same Markovian policy for every goal.
    pub fn from_markov(policy: &StochasticPolicy) -> Self {
        let (ns, na) = (policy.num_states, policy.num_actions);
        let mut probs = Vec::with_capacity(ns * ns * na);
        for s in 0..ns {
            for _ in 0..ns {
                probs.extend_from_slice(policy.row(s));
            }
        }
        GoalConditionedPolicy { num_states: ns, num_actions: na, probs }
    }

    /// Deterministic policy from a `[state][goal]` action table.
    pub fn from_actions(num_states: usize, num_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; num_states * num_states * num_actions];
        for (i, &a) in actions.iter().enumerate() {
            probs[i * num_actions + a] = 1.0;
        }
        GoalConditionedPolicy { num_states, num_actions, probs }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn row(&self, state: usize, goal: usize) -> &[f64] {
        let start = (state * self.num_states + goal) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub(crate) fn set_row(&mut self, state: usize, goal: usize, row: &[f64]) {
        let start = (state * self.num_states + goal) * self.num_actions;
        self.probs[start..start + self.num_actions].copy_from_slice(row);
    }

    /// The Markovian policy this one follows while commanded `goal`.
    pub fn for_goal(&self, goal: usize) -> StochasticPolicy {
        let mut probs = Vec::with_capacity(self.num_states * self.num_actions);
        for s in 0..self.num_states {
            probs.extend_from_slice(self.row(s, goal));
        }
        StochasticPolicy { num_states: self.num_states, num_actions: self.num_actions, probs }
    }

    /// `[state][goal]` table of most-likely actions (lowest index on ties).
    pub fn argmax_table(&self) -> Vec<usize> {
        self.probs
            .chunks(self.num_actions)
            .map(|row| {
                let mut best = 0;
                for (a, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }
}

impl ActionSource for GoalConditionedPolicy {
    fn action_prob(&self, state: usize, goal: usize, action: usize) -> f64 {
        self.row(state, goal)[action]
    }

    fn sample_action<R: Rng + ?Sized>(&self, state: usize, goal: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(state, goal), rng)
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// One step `(s, a, s')` together with its position in the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub trajectory_id: usize,
    pub time_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Rolls out `policy` for exactly `horizon` transitions.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    policy.check_against(mdp)?;
    if horizon == 0 {
        return config_err("horizon must be positive");
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut s = sample_categorical(mdp.initial_dist(), rng);
    states.push(s);
    for _ in 0..horizon {
        let a = sample_categorical(policy.row(s), rng);
        s = mdp.step(s, a, rng);
        actions.push(a);
        states.push(s);
    }
    Ok(Trajectory { states, actions })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return config_err(format!("discount must lie in [0, 1), got {gamma}"));
    }
    Ok(())
}

/// Draws `Δ ≥ 1` with `P(Δ = δ) = (1 − γ) γ^(δ − 1)`.
pub fn sample_geometric_delta<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> Result<usize> {
    check_gamma(gamma)?;
    if gamma == 0.0 {
        return Ok(1);
    }
    // u in (0, 1]; P(Δ > k) = γ^k.
    let u = 1.0 - rng.random::<f64>();
    let extra = (u.ln() / gamma.ln()).floor();
    Ok(1 + extra.min(u32::MAX as f64) as usize)
}

/// Symmetric Dirichlet(alpha) rows, one per state.
pub fn dirichlet_policy<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    alpha: f64,
    rng: &mut R,
) -> Result<StochasticPolicy> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return config_err(format!("Dirichlet concentration must be positive, got {alpha}"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let na = mdp.num_actions();
    let mut probs = Vec::with_capacity(mdp.num_states() * na);
    for _ in 0..mdp.num_states() {
        let row = loop {
            let draws: Vec<f64> = (0..na).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 && total.is_finite() {
                break draws.into_iter().map(|x| x / total).collect::<Vec<_>>();
            }
        };
        probs.extend(row);
    }
    StochasticPolicy::new(mdp.num_states(), na, probs)
}

/// Stored experience: transitions, the trajectories they came from, and the
/// histogram of states at time indices ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    num_states: usize,
    transitions: Vec<Transition>,
    trajectories: Vec<Trajectory>,
    state_marginal: Vec<u64>,
    /// Every state at t ≥ 1, with multiplicity, for O(1) marginal draws.
    marginal_states: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(num_states: usize) -> Self {
        ReplayBuffer {
            num_states,
            transitions: Vec::new(),
            trajectories: Vec::new(),
            state_marginal: vec![0; num_states],
            marginal_states: Vec::new(),
        }
    }

    /// Collects `count` trajectories of `horizon` steps each.
    pub fn collect<R: Rng + ?Sized>(
        mdp: &TabularMdp,
        policy: &StochasticPolicy,
        count: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut buffer = ReplayBuffer::new(mdp.num_states());
        for _ in 0..count {
            buffer.push_trajectory(sample_trajectory(mdp, policy, horizon, rng)?)?;
        }
        Ok(buffer)
    }

    pub fn push_trajectory(&mut self, traj: Trajectory) -> Result<usize> {
        if traj.states.len() != traj.actions.len() + 1 {
            return config_err("trajectory must hold one more state than actions");
        }
        if traj.is_empty() {
            return config_err("trajectory has no transitions");
        }
        if let Some(&bad) = traj.states.iter().find(|&&s| s >= self.num_states) {
            return config_err(format!("state {bad} is out of range"));
        }
        let id = self.trajectories.len();
        for t in 0..traj.len() {
            self.transitions.push(Transition {
                state: traj.states[t],
                action: traj.actions[t],
                next_state: traj.states[t + 1],
                trajectory_id: id,
                time_index: t,
            });
        }
        for &s in &traj.states[1..] {
            self.state_marginal[s] += 1;
            self.marginal_states.push(s);
        }
        self.trajectories.push(traj);
        Ok(id)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn state_marginal(&self) -> &[u64] {
        &self.state_marginal
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Normalized state histogram.
    pub fn empirical_marginal(&self) -> Vec<f64> {
        let total = self.marginal_states.len() as f64;
        self.state_marginal.iter().map(|&c| c as f64 / total).collect()
    }

    /// Empirical marginal floored at `floor` and renormalized, so that every
    /// state has positive support.
    pub fn floored_marginal(&self, floor: f64) -> Vec<f64> {
        floor_and_normalize(&self.empirical_marginal(), floor)
    }

    pub fn sample_transition<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&Transition> {
        if self.transitions.is_empty() {
            return Err(Error::Sampling("buffer is empty".into()));
        }
        Ok(&self.transitions[rng.random_range(0..self.transitions.len())])
    }

    /// State `Δ` steps after `(trajectory_id, time_index)`, with `Δ` drawn from
    /// the geometric distribution restricted to the remaining trajectory.
    /// Out-of-range draws are rejected and redrawn.
    pub fn sample_hindsight_future<R: Rng + ?Sized>(
        &self,
        trajectory_id: usize,
        time_index: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<usize> {
        check_gamma(gamma)?;
        let traj = self.trajectories.get(trajectory_id).ok_or_else(|| {
            Error::Sampling(format!("no trajectory {trajectory_id} in buffer"))
        })?;
        if time_index >= traj.len() {
            return Err(Error::Sampling(format!(
                "position {time_index} of trajectory {trajectory_id} has no future"
            )));
        }
        let remaining = traj.len() - time_index;
        loop {
            let delta = sample_geometric_delta(gamma, rng)?;
            if delta <= remaining {
                return Ok(traj.states[time_index + delta]);
            }
        }
    }

    /// Uniform over all stored states at time indices ≥ 1.
    pub fn sample_marginal_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.marginal_states.is_empty() {
            return Err(Error::Sampling("buffer is empty".into()));
        }
        Ok(self.marginal_states[rng.random_range(0..self.marginal_states.len())])
    }

    /// Per-(s, a) average of the truncated-geometric hindsight distribution
    /// over every buffered position, computed by enumeration. Flattened
    /// `[state][action][goal]`; pairs never seen get an all-zero slice.
    pub fn empirical_future(&self, num_actions: usize, gamma: f64) -> Result<Vec<f64>> {
        check_gamma(gamma)?;
        let ns = self.num_states;
        let mut table = vec![0.0; ns * num_actions * ns];
        let mut counts = vec![0usize; ns * num_actions];
        for tr in &self.transitions {
            let traj = &self.trajectories[tr.trajectory_id];
            let remaining = traj.len() - tr.time_index;
            let norm = 1.0 - gamma.powi(remaining as i32);
            let sa = tr.state * num_actions + tr.action;
            counts[sa] += 1;
            let mut p = (1.0 - gamma) / norm;
            for delta in 1..=remaining {
                table[sa * ns + traj.states[tr.time_index + delta]] += p;
                p *= gamma;
            }
        }
        for (sa, &c) in counts.iter().enumerate() {
            if c > 0 {
                for v in &mut table[sa * ns..(sa + 1) * ns] {
                    *v /= c as f64;
                }
            }
        }
        Ok(table)
    }

    /// Writes `traj_id,t,state,action,next_state` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "traj_id,t,state,action,next_state")?;
        for tr in &self.transitions {
            writeln!(
                out,
                "{},{},{},{},{}",
                tr.trajectory_id, tr.time_index, tr.state, tr.action, tr.next_state
            )?;
        }
        Ok(())
    }

    /// Reads the format produced by [`ReplayBuffer::write_csv`].
    pub fn read_csv<R: BufRead>(input: R, num_states: usize) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "traj_id,t,state,action,next_state" {
            return Err(Error::Parse(format!("unexpected buffer header {header:?}")));
        }
        let mut buffer = ReplayBuffer::new(num_states);
        let mut current: Option<(usize, Trajectory)> = None;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<usize> = line
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            let [traj_id, t, state, action, next_state] = fields[..] else {
                return Err(Error::Parse(format!("line {}: expected 5 fields", lineno + 2)));
            };
            match &mut current {
                Some((id, traj)) if *id == traj_id => {
                    if t != traj.len() || *traj.states.last().unwrap() != state {
                        return Err(Error::Parse(format!(
                            "line {}: trajectory {traj_id} is not contiguous",
                            lineno + 2
                        )));
                    }
                    traj.actions.push(action);
                    traj.states.push(next_state);
                }
                _ => {
                    if let Some((_, done)) = current.take() {
                        buffer.push_trajectory(done)?;
                    }
                    if traj_id != buffer.trajectories.len() || t != 0 {
                        return Err(Error::Parse(format!(
                            "line {}: trajectory {traj_id} starts out of order",
                            lineno + 2
                        )));
                    }
                    current = Some((
                        traj_id,
                        Trajectory { states: vec![state, next_state], actions: vec![action] },
                    ));
                }
            }
        }
        if let Some((_, done)) = current {
            buffer.push_trajectory(done)?;
        }
        Ok(buffer)
    }
}

/// Floors every entry at `floor` and renormalizes to sum to one.
pub fn floor_and_normalize(probs: &[f64], floor: f64) -> Vec<f64> {
    let floored: Vec<f64> = probs.iter().map(|&p| p.max(floor)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|p| p / total).collect()
}
