//! Independent reference computations for the acceptance suite.
//!
//! Nothing here calls into `clearn`: transition tables are plain
//! `[s][a][s']` slices and every sampler is written from scratch.

use std::io::Write;
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Prints one verdict line straight to the process stderr (bypassing test
/// output capture) and returns whether the check held within its budget.
pub fn report(id: u32, name: &str, passed: bool, elapsed: Duration, budget: Duration, detail: &str) -> bool {
    let in_time = elapsed <= budget;
    let ok = passed && in_time;
    let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
    let line = format!(
        "{} {id:02} {name} [{timing}{}]: {detail}\n",
        if ok { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", over budget" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    ok
}

/// Linear-scan inverse CDF.
pub fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// A random row-stochastic table of `rows` rows over `width` outcomes.
pub fn random_rows<R: Rng>(rows: usize, width: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..width).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let total: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|x| x / total));
    }
    out
}

/// Small MDP as flat tables: `t[(s*na + a)*ns + s']`, `pi[s*na + a]`.
#[derive(Debug, Clone)]
pub struct PlainMdp {
    pub ns: usize,
    pub na: usize,
    pub t: Vec<f64>,
    pub pi: Vec<f64>,
}

impl PlainMdp {
    pub fn random<R: Rng>(ns: usize, na: usize, rng: &mut R) -> Self {
        let t = random_rows(ns * na, ns, rng);
        let pi = random_rows(ns, na, rng);
        PlainMdp { ns, na, t, pi }
    }

    fn row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.na + a) * self.ns;
        &self.t[i..i + self.ns]
    }

    /// Largest violation of `p(g|s,a) = (1−γ)T(g|s,a) + γ Σ T(s'|s,a) π(a'|s') p(g|s',a')`.
    pub fn recursion_residual(&self, gamma: f64, p: impl Fn(usize, usize, usize) -> f64) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.ns {
            for a in 0..self.na {
                let row = self.row(s, a);
                for g in 0..self.ns {
                    let mut boot = 0.0;
                    for s2 in 0..self.ns {
                        for a2 in 0..self.na {
                            boot += row[s2] * self.pi[s2 * self.na + a2] * p(s2, a2, g);
                        }
                    }
                    let rhs = (1.0 - gamma) * row[g] + gamma * boot;
                    worst = worst.max((rhs - p(s, a, g)).abs());
                }
            }
        }
        worst
    }

    /// Visit counts of the state at which a rollout from `(s, a)` stops,
    /// stopping after each transition with probability `1 − γ`.
    pub fn rollout_counts<R: Rng>(&self, s: usize, a: usize, gamma: f64, n: usize, rng: &mut R) -> Vec<u64> {
        let mut counts = vec![0u64; self.ns];
        for _ in 0..n {
            let mut state = draw(self.row(s, a), rng);
            while rng.random::<f64>() < gamma {
                let action = draw(&self.pi[state * self.na..(state + 1) * self.na], rng);
                state = draw(self.row(state, action), rng);
            }
            counts[state] += 1;
        }
        counts
    }
}

/// Tabular relabeled Q-learning driven by samples, each entry a running
/// weighted mean of its targets.
struct RunningQ {
    q: Vec<f64>,
    weight: Vec<f64>,
}

impl RunningQ {
    fn new(n: usize) -> Self {
        RunningQ { q: vec![0.0; n], weight: vec![0.0; n] }
    }

    fn update(&mut self, i: usize, target: f64, w: f64) {
        if w > 0.0 {
            self.weight[i] += w;
            self.q[i] += w / self.weight[i] * (target - self.q[i]);
        }
    }
}

/// `n` self-looping states, uniform goals. Returns the mean diagonal
/// `Q(s, g = s)` after `steps` samples.
pub fn simulate_example1(n: usize, gamma: f64, lambda: f64, steps: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut q = RunningQ::new(n * n);
    for _ in 0..steps {
        let s = rng.random_range(0..n);
        let next = s;
        q.update(s * n + next, 1.0, 1.0 - lambda);
        let g = rng.random_range(0..n);
        let target = (gamma * q.q[next * n + g]).clamp(0.0, 1.0);
        q.update(s * n + g, target, lambda);
    }
    (0..n).map(|s| q.q[s * n + s]).sum::<f64>() / n as f64
}

/// Two-state chain: state 0 moves to either state with probability one
/// half, state 1 is absorbing; goals uniform. Returns `[q00, q01, q10, q11]`.
pub fn simulate_example2(gamma: f64, lambda: f64, steps: usize, seed: u64) -> [f64; 4] {
    let mut rng = rng(seed);
    let mut q = RunningQ::new(4);
    for _ in 0..steps {
        let s = rng.random_range(0..2);
        let next = if s == 0 { rng.random_range(0..2) } else { 1 };
        q.update(s * 2 + next, 1.0, 1.0 - lambda);
        let g = rng.random_range(0..2);
        let target = (gamma * q.q[next * 2 + g]).clamp(0.0, 1.0);
        q.update(s * 2 + g, target, lambda);
    }
    [q.q[0], q.q[1], q.q[2], q.q[3]]
}
