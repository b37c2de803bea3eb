//! Classifier and Q-function learners, their tabular operators, and density
//! extraction.

mod steps;
mod tabular;

pub use steps::{mc_c_step, mixed_c_step, q_hindsight_step, td_c_step, Example};
pub use tabular::{
    assignment_sweep, expected_mc_update, expected_mixed_update, expected_q_update, expected_td_update,
    gc_policy_improvement_step, gc_policy_iteration, greedy_action, loss_fixed_point, optimality_sweep, tabular_c_optimality_iteration,
    tabular_c_value_iteration, tabular_q_fixed_point, PolicyIterationTrace, TIE_TOL,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::DiscountedDensity;
use crate::envs::Env;
use crate::error::{config_err, Result};
use crate::net::{adam_step, encode_input, soft_update, AdamState, DenseNet, LabeledBatch, PRED_MAX, PRED_MIN};

/// Cap on stored table probabilities when converting to odds.
pub const TABLE_C_MAX: f64 = 1.0 - 1e-12;
pub const POLYAK_TAU: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub gamma: f64,
    /// Weight on random-goal terms in Q-learning.
    pub relabel_ratio: f64,
    /// TD share of the mixed TD/MC objective.
    pub mix_ratio: f64,
    /// Upper clip on importance weights. `None` means `1/(1 − γ)`.
    pub w_clip: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Goal distribution used in place of the buffer marginal.
    pub goal_distribution: Option<Vec<f64>>,
    pub loss: LossKind,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            gamma: 0.9,
            relabel_ratio: 0.5,
            mix_ratio: 1.0,
            w_clip: None,
            batch_size: 256,
            steps: 1000,
            learning_rate: 3e-3,
            seed: 0,
            goal_distribution: None,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return config_err(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        for (name, v) in [("relabel_ratio", self.relabel_ratio), ("mix_ratio", self.mix_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return config_err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(c) = self.w_clip {
            if !(c > 0.0) {
                return config_err(format!("w_clip must be positive, got {c}"));
            }
        }
        if self.batch_size < 2 {
            return config_err("batch_size must be at least 2");
        }
        if self.steps == 0 {
            return config_err("steps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err("learning_rate must be positive");
        }
        if let Some(d) = &self.goal_distribution {
            if d.iter().any(|p| !(0.0..=1.0).contains(p)) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return config_err("goal_distribution must be a probability vector");
            }
        }
        Ok(())
    }

    pub fn w_clip(&self) -> f64 {
        self.w_clip.unwrap_or(1.0 / (1.0 - self.gamma))
    }
}

/// Classifier odds `C/(1 − C)` per `(s, a, g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub ratio: Vec<f64>,
}

impl RatioTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        RatioTable { num_states, num_actions, ratio: vec![0.0; num_states * num_actions * num_states] }
    }

    pub fn index(&self, s: usize, a: usize, g: usize) -> usize {
        (s * self.num_actions + a) * self.num_states + g
    }

    pub fn get(&self, s: usize, a: usize, g: usize) -> f64 {
        self.ratio[self.index(s, a, g)]
    }

    pub fn sup_distance(&self, other: &RatioTable) -> f64 {
        self.ratio.iter().zip(&other.ratio).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `ratio(s, a, g) · marginal(g)`.
    pub fn density(&self, marginal: &[f64]) -> Result<DiscountedDensity> {
        let ns = self.num_states;
        let probs = self.ratio.iter().enumerate().map(|(i, r)| r * marginal[i % ns]).collect();
        DiscountedDensity::new(ns, self.num_actions, ns, probs)
    }
}

/// Tabular `Q(s, a, g)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub q: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize, g: usize) -> f64 {
        self.q[(s * self.num_actions + a) * self.num_states + g]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetMode {
    /// A lagged copy updated by Polyak averaging after each step.
    Polyak(f64),
    /// Targets read from the model being trained.
    Current,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Net { net: DenseNet, adam: AdamState, env: Env },
    /// Probabilities per `(s, a, g)` and the total example weight each has
    /// absorbed; updates keep the weighted mean of observed labels.
    Table { values: Vec<f64>, weight: Vec<f64> },
}

/// `C(F = 1 | s, a, g)` (or a Q-function sharing the same head).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    num_states: usize,
    num_actions: usize,
    pub backend: Backend,
    pub target_mode: TargetMode,
    pub loss: LossKind,
}

impl ClassifierModel {
    pub fn net<R: Rng + ?Sized>(env: &Env, hidden: &[usize], learning_rate: f64, rng: &mut R) -> Result<Self> {
        let mdp = env.mdp();
        let mut dims = vec![2 * env.obs_dim() + mdp.num_actions()];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = DenseNet::new(&dims, rng)?;
        let adam = AdamState::new(net.params().len(), learning_rate);
        Ok(ClassifierModel {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            backend: Backend::Net { net, adam, env: env.clone() },
            target_mode: TargetMode::Polyak(POLYAK_TAU),
            loss: LossKind::CrossEntropy,
        })
    }

    /// Table with every entry at `init` and no accumulated weight.
    pub fn table(num_states: usize, num_actions: usize, init: f64) -> Self {
        let n = num_states * num_actions * num_states;
        ClassifierModel {
            num_states,
            num_actions,
            backend: Backend::Table { values: vec![init; n], weight: vec![0.0; n] },
            target_mode: TargetMode::Current,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn from_ratio(ratio: &RatioTable) -> Self {
        let mut model = Self::table(ratio.num_states, ratio.num_actions, 0.0);
        if let Backend::Table { values, .. } = &mut model.backend {
            for (v, r) in values.iter_mut().zip(&ratio.ratio) {
                *v = if r.is_infinite() { 1.0 } else { r / (1.0 + r) };
            }
        }
        model
    }

    /// `C = p₊ / (p₊ + m)`. Entries with `p₊ = m = 0` get `C = 0`.
    pub fn bayes_optimal(density: &DiscountedDensity, marginal: &[f64]) -> Result<Self> {
        let ns = density.num_states();
        if marginal.len() != ns || density.num_goals() != ns {
            return config_err("marginal length must equal the number of goals");
        }
        let mut model = Self::table(ns, density.num_actions(), 0.0);
        if let Backend::Table { values, .. } = &mut model.backend {
            for (i, (v, &p)) in values.iter_mut().zip(density.as_slice()).enumerate() {
                let m = marginal[i % ns];
                *v = if p + m > 0.0 { p / (p + m) } else { 0.0 };
            }
        }
        Ok(model)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn is_table(&self) -> bool {
        matches!(self.backend, Backend::Table { .. })
    }

    fn index(&self, s: usize, a: usize, g: usize) -> usize {
        (s * self.num_actions + a) * self.num_states + g
    }

    /// Input features for `state`: a noisy observation for networks,
    /// nothing for tables.
    pub fn features<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Vec<f64> {
        match &self.backend {
            Backend::Net { env, .. } => env.features(state, rng),
            Backend::Table { .. } => Vec::new(),
        }
    }

    /// Prediction from explicit features (ignored by tables).
    pub fn predict_features(&self, s: usize, a: usize, g: usize, s_obs: &[f64], g_obs: &[f64]) -> Result<f64> {
        match &self.backend {
            Backend::Net { net, .. } => net.predict(&encode_input(s_obs, a, g_obs, self.num_actions)),
            Backend::Table { values, .. } => Ok(values[self.index(s, a, g)]),
        }
    }

    /// Deterministic prediction; networks are evaluated at cell centers.
    pub fn predict(&self, s: usize, a: usize, g: usize) -> Result<f64> {
        match &self.backend {
            Backend::Net { net, env, .. } => {
                let emb = env.embedding();
                net.predict(&encode_input(&emb[s], a, &emb[g], self.num_actions))
            }
            Backend::Table { values, .. } => Ok(values[self.index(s, a, g)]),
        }
    }

    /// All predictions, flattened `[state][action][goal]`.
    pub fn predict_all(&self) -> Result<Vec<f64>> {
        let (ns, na) = (self.num_states, self.num_actions);
        match &self.backend {
            Backend::Net { net, env, .. } => {
                let emb = env.embedding();
                let mut out = Vec::with_capacity(ns * na * ns);
                for s in 0..ns {
                    for a in 0..na {
                        for g in 0..ns {
                            out.push(net.predict(&encode_input(&emb[s], a, &emb[g], na))?);
                        }
                    }
                }
                Ok(out)
            }
            Backend::Table { values, .. } => Ok(values.clone()),
        }
    }

    pub fn ratio_table(&self) -> Result<RatioTable> {
        Ok(RatioTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            ratio: self.predict_all()?.into_iter().map(odds).collect(),
        })
    }

    pub fn q_table(&self) -> Result<QTable> {
        Ok(QTable { num_states: self.num_states, num_actions: self.num_actions, q: self.predict_all()? })
    }

    /// One optimizer step (networks) or one pass of running-mean updates
    /// (tables). Returns the weighted loss before the update.
    pub fn apply(&mut self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return config_err("empty batch");
        }
        let loss_kind = self.loss;
        let na = self.num_actions;
        match &mut self.backend {
            Backend::Net { net, adam, .. } => {
                let mut batch = LabeledBatch::with_capacity(net.input_dim(), examples.len());
                for e in examples {
                    batch.push(&encode_input(&e.s_obs, e.a, &e.g_obs, na), e.label, e.weight)?;
                }
                let (loss, grad) = match loss_kind {
                    LossKind::CrossEntropy => net.weighted_ce_gradient(&batch)?,
                    LossKind::SquaredError => net.weighted_mse_gradient(&batch)?,
                };
                adam_step(net.params_mut(), &grad, adam);
                Ok(loss)
            }
            Backend::Table { values, weight } => {
                let ns = self.num_states;
                let mut loss = 0.0;
                for e in examples {
                    let i = (e.s * na + e.a) * ns + e.g;
                    let c = values[i].clamp(PRED_MIN, PRED_MAX);
                    loss += e.weight
                        * match loss_kind {
                            LossKind::CrossEntropy => -e.label * c.ln() - (1.0 - e.label) * (1.0 - c).ln(),
                            LossKind::SquaredError => (c - e.label).powi(2),
                        };
                    if e.weight > 0.0 {
                        weight[i] += e.weight;
                        values[i] += e.weight / weight[i] * (e.label - values[i]);
                    }
                }
                Ok(loss / examples.len() as f64)
            }
        }
    }

    /// A frozen copy suitable as a lagged target.
    pub fn target_copy(&self) -> Self {
        self.clone()
    }

    /// Moves `target` toward this model according to `target_mode`.
    pub fn update_target(&self, target: &mut ClassifierModel) {
        match (&self.backend, &mut target.backend, self.target_mode) {
            (Backend::Net { net, .. }, Backend::Net { net: tnet, .. }, TargetMode::Polyak(tau)) => {
                soft_update(tnet, net, tau)
            }
            _ => *target = self.clone(),
        }
    }
}

/// `C / (1 − C)` with `C` capped below one.
pub fn odds(c: f64) -> f64 {
    let c = c.clamp(0.0, TABLE_C_MAX);
    c / (1.0 - c)
}

/// Bayes-optimal read-out: `f(g | s, a) = odds(s, a, g) · marginal(g)`, raw and
/// renormalized per (s, a).
pub fn density_from_classifier(
    model: &ClassifierModel,
    marginal: &[f64],
) -> Result<(DiscountedDensity, DiscountedDensity)> {
    let ns = model.num_states();
    if marginal.len() != ns {
        return config_err("marginal length must equal the number of states");
    }
    let raw = model.ratio_table()?.density(marginal)?;
    let normalized = raw.renormalized();
    Ok((raw, normalized))
}

/// `Σ_g f(g | s, a)` for every (s, a).
pub fn normalization_mass(model: &ClassifierModel, marginal: &[f64]) -> Result<Vec<f64>> {
    let (raw, _) = density_from_classifier(model, marginal)?;
    Ok(raw.slices().map(|s| s.iter().sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::analytic_density;
    use crate::envs::NoisyGridworld;
    use crate::mdp::dirichlet_policy;
    use crate::rng::seeded;

    #[test]
    fn half_everywhere_returns_marginal() {
        let model = ClassifierModel::table(3, 2, 0.5);
        let m = [0.2, 0.3, 0.5];
        let (raw, _) = density_from_classifier(&model, &m).unwrap();
        for slice in raw.slices() {
            for (a, b) in slice.iter().zip(&m) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn odds_two_doubles_marginal() {
        let mut model = ClassifierModel::table(25, 1, 0.0);
        if let Backend::Table { values, .. } = &mut model.backend {
            values[3] = 2.0 / 3.0;
        }
        let (raw, _) = density_from_classifier(&model, &[1.0 / 25.0; 25]).unwrap();
        assert!((raw.get(0, 0, 3) - 2.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn bayes_optimal_round_trip() {
        let grid = NoisyGridworld::new(5, 5).unwrap();
        let mut rng = seeded(3);
        let policy = dirichlet_policy(grid.mdp(), 1.0, &mut rng).unwrap();
        let truth = analytic_density(grid.mdp(), &policy, 0.9).unwrap();
        let m: Vec<f64> = (0..25).map(|i| (1 + i % 4) as f64).collect();
        let total: f64 = m.iter().sum();
        let m: Vec<f64> = m.iter().map(|x| x / total).collect();
        let model = ClassifierModel::bayes_optimal(&truth, &m).unwrap();
        let (raw, _) = density_from_classifier(&model, &m).unwrap();
        for (a, b) in raw.as_slice().iter().zip(truth.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        for mass in normalization_mass(&model, &m).unwrap() {
            assert!((mass - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn table_update_is_weighted_mean() {
        let mut model = ClassifierModel::table(1, 1, 0.5);
        let ex = |label, weight| Example { s: 0, a: 0, g: 0, s_obs: vec![], g_obs: vec![], label, weight };
        model.apply(&[ex(1.0, 1.0), ex(0.0, 3.0), ex(0.5, 0.0)]).unwrap();
        assert!((model.predict(0, 0, 0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn config_ranges() {
        let mut cfg = LearnerConfig::default();
        assert!(cfg.validate().is_ok());
        assert!((cfg.w_clip() - 10.0).abs() < 1e-12);
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.5;
        cfg.goal_distribution = Some(vec![0.5, 0.6]);
        assert!(cfg.validate().is_err());
    }
}
