use clearn::analytic::{analytic_density, forward_kl, DiscountedDensity};
use clearn::experiment::plot::render;
use clearn::experiment::{execute, run_recipe, run_single, ExperimentConfig, Method, Recipe, SeedContext, SweepResult};
use clearn::Error;

fn small(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::named(name);
    cfg.train_steps = 200;
    cfg.batch_size = 64;
    cfg.num_seeds = 2;
    cfg.num_trajectories = 20;
    cfg.trajectory_length = 30;
    cfg.telemetry_every = 50;
    cfg
}

#[test]
fn results_round_trip_through_csv() {
    let mut cfg = small("roundtrip");
    cfg.method = Method::TabularC;
    let outcome = run_single(&cfg, None).unwrap();
    let mut bytes = Vec::new();
    outcome.result.write_csv(&mut bytes).unwrap();
    let back = SweepResult::read_csv(&bytes[..]).unwrap();
    assert_eq!(back.rows.len(), outcome.result.rows.len());
    for (a, b) in back.rows.iter().zip(&outcome.result.rows) {
        assert_eq!((a.method, a.seed, a.step, a.lambda), (b.method, b.seed, b.step, b.lambda));
        assert!((a.kl - b.kl).abs() <= 1e-12 * b.kl.abs().max(1e-300) || a.kl == b.kl);
    }
}

#[test]
fn execute_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("artifacts");
    cfg.method = Method::McC;
    cfg.num_seeds = 1;
    cfg.output_dir = Some(dir.path().to_path_buf());
    let art = execute(&cfg, None).unwrap();
    for f in ["config.json", "VERSION", "results.csv", "plot.svg", "gates.txt"] {
        assert!(art.dir.join(f).exists(), "{f} missing");
    }
    let saved = ExperimentConfig::load(&art.dir.join("config.json")).unwrap();
    assert_eq!(saved, cfg);
    let version = std::fs::read_to_string(art.dir.join("VERSION")).unwrap();
    assert!(version.starts_with("clearn "));

    let telemetry: Vec<_> = std::fs::read_dir(art.dir.join("telemetry")).unwrap().collect();
    assert_eq!(telemetry.len(), 1);
    let text = std::fs::read_to_string(telemetry[0].as_ref().unwrap().path()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss,kl,mass_mean"));
    let steps: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![50, 100, 150, 200]);
}

#[test]
fn plots_are_deterministic_and_mark_the_predicted_ratio() {
    let mut cfg = small("sweep-plot");
    cfg.train_steps = 20;
    cfg.num_seeds = 1;
    cfg.lambda_grid = Some(vec![0.5, 0.9]);
    cfg.gamma_grid = Some(vec![0.5]);
    let outcome = run_recipe(Recipe::LambdaSweep, &cfg, None).unwrap();
    let a = render(&outcome.result, "lambda-sweep").unwrap();
    let b = render(&outcome.result, "lambda-sweep").unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("<svg"));
    assert!(a.contains("#2ca02c"), "predicted ratio not drawn");
    assert!(!render(&outcome.result, "kl-bars").unwrap().contains("#2ca02c"));
    assert_eq!(outcome.gates.len(), 2);
}

#[test]
fn empty_grids_are_config_errors() {
    let mut cfg = small("empty");
    cfg.lambda_grid = Some(vec![]);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let text = r#"{"name": "x", "gamma_grid": []}"#;
    assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::from_json(r#"{"name": "x", "method": "nope"}"#), Err(Error::Config(_))));
}

#[test]
fn zero_discount_learners_beat_the_uniform_guess() {
    let mut cfg = small("gamma0");
    cfg.gamma = 0.0;
    cfg.train_steps = 300;
    for method in [Method::McC, Method::TdC] {
        cfg.method = method;
        let outcome = run_single(&cfg, None).unwrap();
        for row in &outcome.result.rows {
            let ctx = SeedContext::build(&cfg, row.seed).unwrap();
            let mdp = ctx.env.mdp();
            let (ns, na) = (mdp.num_states(), mdp.num_actions());
            let truth = analytic_density(mdp, &ctx.target, 0.0).unwrap();
            let uniform = DiscountedDensity::new(ns, na, ns, vec![1.0 / ns as f64; ns * na * ns]).unwrap();
            let baseline = forward_kl(&truth, &uniform).unwrap();
            assert!(row.kl < baseline, "{method}: {} vs uniform {baseline}", row.kl);
        }
    }
}

#[test]
fn goal_conditioned_iteration_handles_small_chains() {
    for env in ["example2", "example1:3"] {
        let mut cfg = small("gcrl");
        cfg.env = env.into();
        cfg.num_seeds = 2;
        let outcome = run_recipe(Recipe::GcrlTabular, &cfg, None).unwrap();
        for gate in &outcome.gates {
            assert!(gate.passed, "{env}: {}", gate.line());
        }
        assert!(outcome.result.rows.iter().all(|r| r.method == Method::TabularCOpt));
    }
}

#[test]
fn schema_lists_every_config_key() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schema/experiment_config.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let mut documented: Vec<&String> = schema["properties"].as_object().unwrap().keys().collect();
    let cfg = serde_json::to_value(ExperimentConfig::named("x")).unwrap();
    let mut actual: Vec<&String> = cfg.as_object().unwrap().keys().collect();
    documented.sort();
    actual.sort();
    assert_eq!(documented, actual);
    for (key, value) in cfg.as_object().unwrap() {
        if let Some(default) = schema["properties"][key].get("default") {
            assert_eq!(default, value, "default of {key}");
        }
    }
}
