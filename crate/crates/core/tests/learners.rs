use clearn::analytic::{analytic_density, example2_fixed_points};
use clearn::learners::{
    expected_mc_update, expected_mixed_update, mc_c_step, mixed_c_step, q_hindsight_step, td_c_step,
    ClassifierModel, LearnerConfig, RatioTable,
};
use clearn::mdp::{dirichlet_policy, ReplayBuffer, StochasticPolicy, TabularMdp, Trajectory};
use clearn::rng::seeded;

const NS: usize = 3;
const NA: usize = 2;

fn setup(seed: u64) -> (TabularMdp, StochasticPolicy, ReplayBuffer) {
    let mut rng = seeded(seed);
    let t = vec![
        0.6, 0.3, 0.1, //
        0.1, 0.1, 0.8, //
        0.2, 0.7, 0.1, //
        0.5, 0.0, 0.5, //
        0.3, 0.3, 0.4, //
        0.0, 0.1, 0.9,
    ];
    let mdp = TabularMdp::new(NS, NA, t, vec![1.0 / 3.0; 3]).unwrap();
    let policy = dirichlet_policy(&mdp, 1.0, &mut rng).unwrap();
    let buffer = ReplayBuffer::collect(&mdp, &policy, 100, 100, &mut rng).unwrap();
    (mdp, policy, buffer)
}

/// The MDP whose transition rows are the buffer's empirical frequencies.
fn empirical_mdp(buffer: &ReplayBuffer) -> TabularMdp {
    let mut counts = vec![0.0; NS * NA * NS];
    for tr in buffer.transitions() {
        counts[(tr.state * NA + tr.action) * NS + tr.next_state] += 1.0;
    }
    for row in counts.chunks_mut(NS) {
        let total: f64 = row.iter().sum();
        assert!(total > 0.0, "every (s, a) pair is visited");
        row.iter_mut().for_each(|x| *x /= total);
    }
    TabularMdp::new(NS, NA, counts, vec![1.0 / 3.0; 3]).unwrap()
}

fn config(gamma: f64) -> LearnerConfig {
    LearnerConfig { gamma, batch_size: 64, w_clip: Some(20.0), ..LearnerConfig::default() }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn sampled_tabular_td_reaches_the_empirical_density() {
    let (_, policy, buffer) = setup(1);
    let gamma = 0.5;
    let cfg = config(gamma);
    let mut rng = seeded(2);
    let mut model = ClassifierModel::table(NS, NA, 0.5);
    for _ in 0..20_000 {
        td_c_step(&mut model, None, &buffer, &policy, &cfg, &mut rng).unwrap();
    }
    let marginal = buffer.empirical_marginal();
    let est = model.ratio_table().unwrap().density(&marginal).unwrap();
    let truth = analytic_density(&empirical_mdp(&buffer), &policy, gamma).unwrap();
    let gap = max_gap(est.as_slice(), truth.as_slice());
    assert!(gap < 0.02, "gap {gap}");
}

#[test]
fn sampled_tabular_mc_reaches_the_hindsight_distribution() {
    let (_, _, buffer) = setup(3);
    let gamma = 0.7;
    let cfg = config(gamma);
    let mut rng = seeded(4);
    let mut model = ClassifierModel::table(NS, NA, 0.5);
    for _ in 0..10_000 {
        mc_c_step(&mut model, &buffer, &cfg, &mut rng).unwrap();
    }
    let marginal = buffer.empirical_marginal();
    let future = buffer.empirical_future(NA, gamma).unwrap();
    let want = expected_mc_update(NS, NA, &future, &marginal).density(&marginal).unwrap();
    let est = model.ratio_table().unwrap().density(&marginal).unwrap();
    let gap = max_gap(est.as_slice(), want.as_slice());
    assert!(gap < 0.02, "gap {gap}");
}

#[test]
fn sampled_tabular_mixed_reaches_its_expected_fixed_point() {
    let (_, policy, buffer) = setup(5);
    let gamma = 0.5;
    let cfg = LearnerConfig { mix_ratio: 0.5, ..config(gamma) };
    let mut rng = seeded(6);
    let mut model = ClassifierModel::table(NS, NA, 0.5);
    for _ in 0..20_000 {
        mixed_c_step(&mut model, None, &buffer, &policy, &cfg, &mut rng).unwrap();
    }
    let marginal = buffer.empirical_marginal();
    let future = buffer.empirical_future(NA, gamma).unwrap();
    let emp = empirical_mdp(&buffer);
    let mut fixed = RatioTable::zeros(NS, NA);
    for _ in 0..500 {
        fixed = expected_mixed_update(&emp, &policy, &marginal, &future, gamma, 0.5, None, &fixed);
    }
    let want = fixed.density(&marginal).unwrap();
    let est = model.ratio_table().unwrap().density(&marginal).unwrap();
    let gap = max_gap(est.as_slice(), want.as_slice());
    assert!(gap < 0.02, "gap {gap}");
}

#[test]
fn tabular_q_learning_on_the_two_state_chain_matches_the_oracle() {
    let mut buffer = ReplayBuffer::new(2);
    for states in [[0, 0], [0, 1], [1, 1]] {
        buffer.push_trajectory(Trajectory { states: states.to_vec(), actions: vec![0] }).unwrap();
    }
    let (gamma, lambda) = (0.9, 0.5);
    let cfg = LearnerConfig {
        gamma,
        relabel_ratio: lambda,
        batch_size: 64,
        goal_distribution: Some(vec![0.5, 0.5]),
        ..LearnerConfig::default()
    };
    let policy = StochasticPolicy::uniform(2, 1);
    let mut rng = seeded(7);
    let mut model = ClassifierModel::table(2, 1, 0.0);
    for _ in 0..20_000 {
        q_hindsight_step(&mut model, None, &buffer, &policy, &cfg, &mut rng).unwrap();
    }
    let oracle = example2_fixed_points(gamma, lambda).unwrap();
    let q = model.q_table().unwrap();
    for (key, (s, g)) in [("q11", (0, 0)), ("q12", (0, 1)), ("q21", (1, 0)), ("q22", (1, 1))] {
        let gap = (q.get(s, 0, g) - oracle.get(key)).abs();
        assert!(gap < 0.01, "{key}: {} vs {}", q.get(s, 0, g), oracle.get(key));
    }
}

#[test]
fn learners_reject_invalid_configs() {
    let bad = [
        LearnerConfig { gamma: 1.0, ..LearnerConfig::default() },
        LearnerConfig { relabel_ratio: 1.5, ..LearnerConfig::default() },
        LearnerConfig { batch_size: 0, ..LearnerConfig::default() },
        LearnerConfig { w_clip: Some(0.0), ..LearnerConfig::default() },
        LearnerConfig { learning_rate: -1.0, ..LearnerConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}
