use rand::Rng;

use super::{odds, ClassifierModel, LearnerConfig};
use crate::error::{Error, Result};
use crate::mdp::{sample_categorical, ActionSource, ReplayBuffer};

/// One weighted, soft-labelled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub s: usize,
    pub a: usize,
    pub g: usize,
    pub s_obs: Vec<f64>,
    pub g_obs: Vec<f64>,
    pub label: f64,
    pub weight: f64,
}

fn sample_goal<R: Rng + ?Sized>(buffer: &ReplayBuffer, cfg: &LearnerConfig, rng: &mut R) -> Result<usize> {
    match &cfg.goal_distribution {
        Some(d) => Ok(sample_categorical(d, rng)),
        None => buffer.sample_marginal_state(rng),
    }
}

fn check_buffer(buffer: &ReplayBuffer) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::Sampling("buffer holds no transitions".into()));
    }
    Ok(())
}

/// Odds of `target` at `(s', a', g)` where `a' ~ π(· | s', g)`, reusing the
/// goal observation of the current example. Clipped to `[0, w_clip]`.
fn next_weight<R: Rng + ?Sized>(
    target: &ClassifierModel,
    policy: &impl ActionSource,
    next_state: usize,
    goal: usize,
    g_obs: &[f64],
    w_clip: f64,
    rng: &mut R,
) -> Result<f64> {
    let a_next = policy.sample_action(next_state, goal, rng);
    let s_obs = target.features(next_state, rng);
    let c = target.predict_features(next_state, a_next, goal, &s_obs, g_obs)?;
    Ok(odds(c).clamp(0.0, w_clip))
}

/// Monte Carlo C-learning: half the batch pairs `(s, a)` with a hindsight
/// future (label 1), half with a marginal state (label 0).
pub fn mc_c_step<R: Rng + ?Sized>(
    model: &mut ClassifierModel,
    buffer: &ReplayBuffer,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> Result<f64> {
    check_buffer(buffer)?;
    let half = cfg.batch_size / 2;
    let mut examples = Vec::with_capacity(2 * half);
    for _ in 0..half {
        let tr = *buffer.sample_transition(rng)?;
        let future = buffer.sample_hindsight_future(tr.trajectory_id, tr.time_index, cfg.gamma, rng)?;
        let negative = sample_goal(buffer, cfg, rng)?;
        let s_obs = model.features(tr.state, rng);
        let f_obs = model.features(future, rng);
        let n_obs = model.features(negative, rng);
        examples.push(Example {
            s: tr.state,
            a: tr.action,
            g: future,
            s_obs: s_obs.clone(),
            g_obs: f_obs,
            label: 1.0,
            weight: 1.0,
        });
        examples.push(Example { s: tr.state, a: tr.action, g: negative, s_obs, g_obs: n_obs, label: 0.0, weight: 1.0 });
    }
    model.apply(&examples)
}

/// Off-policy TD C-learning in its two-term cross-entropy form:
/// `(s, a, s')` with label 1 and weight `1 − γ`, and `(s, a, g)` with label
/// `γw/(1 + γw)` and weight `1 + γw`.
pub fn td_c_step<R: Rng + ?Sized>(
    model: &mut ClassifierModel,
    target: Option<&ClassifierModel>,
    buffer: &ReplayBuffer,
    policy: &impl ActionSource,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> Result<f64> {
    check_buffer(buffer)?;
    let gamma = cfg.gamma;
    let w_clip = cfg.w_clip();
    let half = cfg.batch_size / 2;
    let mut examples = Vec::with_capacity(2 * half);
    {
        let tm: &ClassifierModel = target.unwrap_or(model);
        for _ in 0..half {
            let tr = *buffer.sample_transition(rng)?;
            let goal = sample_goal(buffer, cfg, rng)?;
            let s_obs = model.features(tr.state, rng);
            let next_obs = model.features(tr.next_state, rng);
            let g_obs = model.features(goal, rng);
            let w = next_weight(tm, policy, tr.next_state, goal, &g_obs, w_clip, rng)?;
            examples.push(Example {
                s: tr.state,
                a: tr.action,
                g: tr.next_state,
                s_obs: s_obs.clone(),
                g_obs: next_obs,
                label: 1.0,
                weight: 1.0 - gamma,
            });
            examples.push(Example {
                s: tr.state,
                a: tr.action,
                g: goal,
                s_obs,
                g_obs,
                label: gamma * w / (1.0 + gamma * w),
                weight: 1.0 + gamma * w,
            });
        }
    }
    model.apply(&examples)
}

/// Mixed TD/MC C-learning. The first half of the batch holds next states
/// (probability `mix_ratio`) or hindsight futures; the second half holds
/// marginal goals with the TD label scaled by `mix_ratio`.
pub fn mixed_c_step<R: Rng + ?Sized>(
    model: &mut ClassifierModel,
    target: Option<&ClassifierModel>,
    buffer: &ReplayBuffer,
    policy: &impl ActionSource,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> Result<f64> {
    check_buffer(buffer)?;
    let gamma = cfg.gamma;
    let lambda = cfg.mix_ratio;
    let w_clip = cfg.w_clip();
    let half = cfg.batch_size / 2;
    let mut examples = Vec::with_capacity(2 * half);
    {
        let tm: &ClassifierModel = target.unwrap_or(model);
        for _ in 0..half {
            let tr = *buffer.sample_transition(rng)?;
            let s_obs = model.features(tr.state, rng);
            let use_next = lambda >= 1.0 || (lambda > 0.0 && rng.random::<f64>() < lambda);
            let (positive, weight) = if use_next {
                (tr.next_state, 1.0 - gamma)
            } else {
                (buffer.sample_hindsight_future(tr.trajectory_id, tr.time_index, gamma, rng)?, 1.0)
            };
            let p_obs = model.features(positive, rng);
            examples.push(Example {
                s: tr.state,
                a: tr.action,
                g: positive,
                s_obs: s_obs.clone(),
                g_obs: p_obs,
                label: 1.0,
                weight,
            });

            let tr = *buffer.sample_transition(rng)?;
            let s_obs = model.features(tr.state, rng);
            let goal = sample_goal(buffer, cfg, rng)?;
            let g_obs = model.features(goal, rng);
            let lw = if lambda > 0.0 {
                lambda * gamma * next_weight(tm, policy, tr.next_state, goal, &g_obs, w_clip, rng)?
            } else {
                0.0
            };
            examples.push(Example {
                s: tr.state,
                a: tr.action,
                g: goal,
                s_obs,
                g_obs,
                label: lw / (1.0 + lw),
                weight: 1.0 + lw,
            });
        }
    }
    model.apply(&examples)
}

/// Q-learning with hindsight relabeling, as loss reweighting over a fixed
/// 50/50 batch: `(s, a, s')` with label 1 and weight `1 − λ`, and
/// `(s, a, g)` with label `clamp(γ Q'(s', a', g))` and weight `λ`.
pub fn q_hindsight_step<R: Rng + ?Sized>(
    model: &mut ClassifierModel,
    target: Option<&ClassifierModel>,
    buffer: &ReplayBuffer,
    policy: &impl ActionSource,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> Result<f64> {
    check_buffer(buffer)?;
    let gamma = cfg.gamma;
    let lambda = cfg.relabel_ratio;
    let half = cfg.batch_size / 2;
    let mut examples = Vec::with_capacity(2 * half);
    {
        let tm: &ClassifierModel = target.unwrap_or(model);
        for _ in 0..half {
            let tr = *buffer.sample_transition(rng)?;
            let goal = sample_goal(buffer, cfg, rng)?;
            let s_obs = model.features(tr.state, rng);
            let next_obs = model.features(tr.next_state, rng);
            let g_obs = model.features(goal, rng);
            let a_next = policy.sample_action(tr.next_state, goal, rng);
            let sn_obs = tm.features(tr.next_state, rng);
            let q_next = tm.predict_features(tr.next_state, a_next, goal, &sn_obs, &g_obs)?;
            examples.push(Example {
                s: tr.state,
                a: tr.action,
                g: tr.next_state,
                s_obs: s_obs.clone(),
                g_obs: next_obs,
                label: 1.0,
                weight: 1.0 - lambda,
            });
            examples.push(Example {
                s: tr.state,
                a: tr.action,
                g: goal,
                s_obs,
                g_obs,
                label: (gamma * q_next).clamp(0.0, 1.0),
                weight: lambda,
            });
        }
    }
    model.apply(&examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{StochasticPolicy, Trajectory};
    use crate::rng::seeded;

    #[test]
    fn zero_discount_td_matches_next_state_mc() {
        let mut buffer = ReplayBuffer::new(3);
        buffer.push_trajectory(Trajectory { states: vec![0, 1, 2, 0], actions: vec![0, 0, 0] }).unwrap();
        let cfg = LearnerConfig { gamma: 0.0, batch_size: 64, ..Default::default() };
        let policy = StochasticPolicy::uniform(3, 1);
        let mut td = ClassifierModel::table(3, 1, 0.5);
        let mut mc = ClassifierModel::table(3, 1, 0.5);
        let mut rng_a = seeded(9);
        let mut rng_b = seeded(9);
        for _ in 0..200 {
            td_c_step(&mut td, None, &buffer, &policy, &cfg, &mut rng_a).unwrap();
            mc_c_step(&mut mc, &buffer, &cfg, &mut rng_b).unwrap();
        }
        // Same expected labels: 1 on successors, 0 on marginal goals.
        for s in 0..3 {
            let succ = (s + 1) % 3;
            assert!(td.predict(s, 0, succ).unwrap() > 0.4);
            for g in 0..3 {
                if g != succ {
                    assert!(td.predict(s, 0, g).unwrap() < td.predict(s, 0, succ).unwrap());
                    assert!(mc.predict(s, 0, g).unwrap() < mc.predict(s, 0, succ).unwrap());
                }
            }
        }
    }

    #[test]
    fn empty_buffer_is_sampling_error() {
        let buffer = ReplayBuffer::new(2);
        let mut model = ClassifierModel::table(2, 1, 0.5);
        let cfg = LearnerConfig::default();
        assert!(matches!(mc_c_step(&mut model, &buffer, &cfg, &mut seeded(0)), Err(Error::Sampling(_))));
    }
}
