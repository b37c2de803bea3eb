use std::path::Path;
use std::process::{Command, Output};

fn clearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clearn")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, body: serde_json::Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn oracle_prints_the_fixed_point_as_json() {
    let (gamma, lambda, n) = (0.9, 0.5, 5.0);
    let out = clearn(&["oracle", "example1", "--gamma", "0.9", "--lambda", "0.5", "--n", "5"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let q = v["values"]["q_normalized"].as_f64().unwrap();
    let want = (1.0 - lambda) / ((1.0 - lambda) + lambda / n * (1.0 - gamma));
    assert!((q - want).abs() < 1e-9, "{q} vs {want}");
    assert!(v["residual"].as_f64().unwrap() < 1e-9);

    let out = clearn(&["oracle", "example2", "--gamma", "0.9", "--lambda", "0.5"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["values"]["q21"].as_f64(), Some(0.0));
    assert!((v["values"]["true_density"].as_f64().unwrap() - 0.1 / 0.55).abs() < 1e-12);
}

#[test]
fn analytic_writes_normalized_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("density.csv");
    let out = clearn(&["analytic", "example2", "--gamma", "0.5", "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, ["state", "action", "goal", "prob"]);
    let mut mass = [0.0f64; 2];
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        mass[cols[0].parse::<usize>().unwrap()] += cols[3].parse::<f64>().unwrap();
    }
    for m in mass {
        assert!((m - 1.0).abs() < 1e-9, "{mass:?}");
    }
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), serde_json::json!({ "name": "x", "gamma": 1.5 }));
    assert_eq!(code(&clearn(&["run", &bad])), 2);

    let no_recipe = write_config(dir.path(), serde_json::json!({ "name": "x" }));
    let out = clearn(&["sweep", &no_recipe]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("recipe"));

    assert_eq!(code(&clearn(&["oracle", "example3", "--gamma", "0.5", "--lambda", "0.5"])), 2);
    assert_eq!(code(&clearn(&["run", "/nonexistent/config.json"])), 2);
}

#[test]
fn run_then_plot_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        serde_json::json!({
            "name": "cli-run", "method": "mc-c", "train_steps": 50, "batch_size": 32,
            "num_seeds": 1, "num_trajectories": 10, "trajectory_length": 20,
        }),
    );
    let run_dir = dir.path().join("run");
    let out = clearn(&["run", &cfg, "--out", run_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = run_dir.join("results.csv");
    assert!(results.exists());

    let out = clearn(&["plot", results.to_str().unwrap(), "--layout", "kl-bars"]);
    assert_eq!(code(&out), 0);
    let svg = std::fs::read_to_string(run_dir.join("results.svg")).unwrap();
    assert_eq!(svg, std::fs::read_to_string(run_dir.join("plot.svg")).unwrap());

    let out = clearn(&["plot", results.to_str().unwrap(), "--layout", "pie"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn failed_gates_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    // A single, distant lambda cannot sit near the predicted ratio.
    let cfg = write_config(
        dir.path(),
        serde_json::json!({
            "name": "cli-gates", "recipe": "lambda-sweep", "lambda_grid": [0.1], "gamma_grid": [0.9],
            "train_steps": 20, "batch_size": 32, "num_seeds": 1,
            "num_trajectories": 10, "trajectory_length": 20,
        }),
    );
    let out = clearn(&["sweep", &cfg, "--out", dir.path().join("sweep").to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL best lambda near")), "{stdout}");
}
