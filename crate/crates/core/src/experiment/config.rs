use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::error::{config_err, Error, Result};
use crate::learners::LearnerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    McC,
    TdC,
    MixedC,
    QHindsight,
    TabularC,
    TabularCOpt,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::McC, Method::TdC, Method::MixedC, Method::QHindsight, Method::TabularC, Method::TabularCOpt];

    pub fn name(self) -> &'static str {
        match self {
            Method::McC => "mc-c",
            Method::TdC => "td-c",
            Method::MixedC => "mixed-c",
            Method::QHindsight => "q-hindsight",
            Method::TabularC => "tabular-c",
            Method::TabularCOpt => "tabular-c-opt",
        }
    }

    pub fn is_tabular(self) -> bool {
        matches!(self, Method::TabularC | Method::TabularCOpt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    OnpolicyKl,
    OffpolicyKl,
    Normalization,
    LambdaSweep,
    GcrlTabular,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::OnpolicyKl => "onpolicy-kl",
            Recipe::OffpolicyKl => "offpolicy-kl",
            Recipe::Normalization => "normalization",
            Recipe::LambdaSweep => "lambda-sweep",
            Recipe::GcrlTabular => "gcrl-tabular",
        }
    }

    /// Plot layout written next to the results.
    pub fn layout(self) -> &'static str {
        match self {
            Recipe::LambdaSweep => "lambda-sweep",
            Recipe::Normalization => "normalization",
            _ => "kl-bars",
        }
    }
}

pub const DEFAULT_LAMBDA_GRID: [f64; 11] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];
pub const NORMALIZATION_LAMBDA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_GAMMA_GRID: [f64; 2] = [0.5, 0.9];

fn default_env() -> String {
    "gridworld5".into()
}
fn default_method() -> Method {
    Method::TdC
}
fn default_gamma() -> f64 {
    0.9
}
fn default_relabel() -> f64 {
    0.5
}
fn default_mix() -> f64 {
    1.0
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_steps() -> usize {
    1000
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    3e-3
}
fn default_trajectories() -> usize {
    100
}
fn default_length() -> usize {
    100
}
fn default_seeds() -> usize {
    5
}
fn default_alpha() -> f64 {
    1.0
}
fn default_telemetry_every() -> usize {
    100
}
fn default_tau() -> f64 {
    1.0
}

/// One experiment: a single method (`run`) or a named recipe (`sweep`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_env")]
    pub env: String,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub recipe: Option<Recipe>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_relabel")]
    pub relabel_ratio: f64,
    #[serde(default = "default_mix")]
    pub mix_ratio: f64,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_steps")]
    pub train_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_trajectories")]
    pub num_trajectories: usize,
    #[serde(default = "default_length")]
    pub trajectory_length: usize,
    #[serde(default = "default_seeds")]
    pub num_seeds: usize,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default)]
    pub w_clip: Option<f64>,
    /// Polyak rate of the target network; 1 reads targets from the live net.
    #[serde(default = "default_tau")]
    pub target_tau: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Evaluate a second Dirichlet policy instead of the behavior policy.
    #[serde(default)]
    pub off_policy: bool,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma_grid: Option<Vec<f64>>,
    /// Uniform goal distribution instead of the buffer marginal.
    #[serde(default)]
    pub uniform_goals: bool,
    #[serde(default = "default_telemetry_every")]
    pub telemetry_every: usize,
    /// Record wall-clock milliseconds; off by default so that reruns are
    /// byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    /// Defaults for every field except the name.
    pub fn named(name: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "name": name })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return config_err("name must be non-empty");
        }
        Env::from_name(&self.env)?;
        self.learner(self.gamma, self.relabel_ratio, self.mix_ratio, 0).validate()?;
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return config_err("hidden_dims entries must be positive");
        }
        if self.num_trajectories == 0 || self.trajectory_length == 0 {
            return config_err("num_trajectories and trajectory_length must be positive");
        }
        if self.num_seeds == 0 {
            return config_err("num_seeds must be positive");
        }
        if !(self.dirichlet_alpha > 0.0) {
            return config_err("dirichlet_alpha must be positive");
        }
        if !(self.target_tau > 0.0 && self.target_tau <= 1.0) {
            return config_err("target_tau must lie in (0, 1]");
        }
        if self.telemetry_every == 0 {
            return config_err("telemetry_every must be positive");
        }
        for (name, grid) in [("lambda_grid", &self.lambda_grid), ("gamma_grid", &self.gamma_grid)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    return config_err(format!("{name} must not be empty"));
                }
            }
        }
        if let Some(g) = &self.lambda_grid {
            if g.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return config_err("lambda_grid entries must lie in [0, 1]");
            }
        }
        if let Some(g) = &self.gamma_grid {
            if g.iter().any(|x| !(0.0..1.0).contains(x)) {
                return config_err("gamma_grid entries must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn lambda_grid_or(&self, default: &[f64]) -> Vec<f64> {
        self.lambda_grid.clone().unwrap_or_else(|| default.to_vec())
    }

    pub fn gamma_grid_or(&self, default: &[f64]) -> Vec<f64> {
        self.gamma_grid.clone().unwrap_or_else(|| default.to_vec())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("results").join(&self.name))
    }

    pub fn learner(&self, gamma: f64, relabel_ratio: f64, mix_ratio: f64, seed: u64) -> LearnerConfig {
        LearnerConfig {
            gamma,
            relabel_ratio,
            mix_ratio,
            w_clip: self.w_clip,
            batch_size: self.batch_size,
            steps: self.train_steps,
            learning_rate: self.learning_rate,
            seed,
            goal_distribution: None,
            loss: crate::learners::LossKind::CrossEntropy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_gridworld_protocol() {
        let cfg = ExperimentConfig::named("x");
        assert_eq!(cfg.hidden_dims, vec![32]);
        assert_eq!(cfg.train_steps, 1000);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.learning_rate, 3e-3);
        assert_eq!((cfg.num_trajectories, cfg.trajectory_length), (100, 100));
        assert_eq!(cfg.num_seeds, 5);
        assert!(!cfg.record_wall_time);
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let cfg = ExperimentConfig::from_json(r#"{"name": "a", "method": "q-hindsight", "gamma": 0.5}"#).unwrap();
        assert_eq!(cfg.method, Method::QHindsight);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(ExperimentConfig::from_json(r#"{"name": "a", "gamma": 1.5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"name": "a", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"name": "a", "env": "maze"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"name": "a", "lambda_grid": []}"#).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
