use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dhs-ensemble"));
    cmd.env_remove("DHS_ENSEMBLE_OUT");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn dhs-ensemble");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// A small experiment: one day of identification data, short training, a
/// six-hour scenario.
fn small_config(dir: &Path, output: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{"experiment": {{"training_days": 1.0, "train": {{"epochs": 10, "hidden_size": 3}}, "scenario": {{"days": 0.25}}}},
            "strategy": "md2", "output_dir": "{output}"}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(bin().arg("--help"));
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["collect", "train", "fit-benchmark", "run", "compare", "mpc-step"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn collect_train_and_fit_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("low.csv");
    assert!(run(bin().args(["--seed", "3", "collect", "--regime", "low", "--days", "0.5", "--out"]).arg(&data)).status.success());
    let header = fs::read_to_string(&data).unwrap();
    assert!(header.lines().nth(1).unwrap().starts_with("T0_s,q_tes,P1_c,P2_c,T0_r,q0"));

    fs::write(d.join("train.json"), r#"{"epochs": 3, "hidden_size": 2, "subsequence": 24}"#).unwrap();
    let model = d.join("model.json");
    let out = run(bin()
        .args(["--seed", "1", "train", "--dataset"])
        .arg(&data)
        .arg("--config")
        .arg(d.join("train.json"))
        .arg("--out")
        .arg(&model));
    assert!(out.status.success());
    assert!(model.exists());
    let history = fs::read_to_string(d.join("model.json.loss.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 4);

    let bench = d.join("bench.json");
    assert!(run(bin().args(["fit-benchmark", "--dataset"]).arg(&data).arg("--out").arg(&bench)).status.success());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(doc["mean"].as_array().unwrap().len(), 4);
}

#[test]
fn collect_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = ["a.csv", "b.csv"].iter().map(|n| dir.path().join(n)).collect();
    for p in &paths {
        assert!(run(bin().args(["--seed", "9", "collect", "--regime", "high", "--days", "0.2", "--out"]).arg(p)).status.success());
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
}

#[test]
fn compare_then_mpc_step_on_the_saved_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = small_config(d, "unused");
    let out_dir = d.join("artifacts");
    let out = run(bin()
        .env("DHS_ENSEMBLE_OUT", &out_dir)
        .current_dir(d)
        .args(["compare", "--config"])
        .arg(&config)
        .args(["--strategies", "rb,md1,md2"]));
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("RB") && table.contains("MD-2"));
    assert!(!d.join("unused").exists());
    for f in [
        "log_rb.csv",
        "log_md1.csv",
        "log_md2.csv",
        "table.csv",
        "fig_scenario.svg",
        "fig_temps_md2.svg",
        "fig_err_0.svg",
        "fig_err_1.svg",
        "ensemble/manifest.json",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(out_dir.join("table.csv")).unwrap();
    assert!(csv.starts_with("strategy,J,V,t_mean,t_std"));

    let state = d.join("state.json");
    fs::write(
        &state,
        r#"{"states": [[0.1, 0.0, -0.1], [0.0, 0.2, 0.0]], "previous_input": [75.0, 0.0, 100000.0, 100000.0]}"#,
    )
    .unwrap();
    let mpc = d.join("mpc.json");
    fs::write(&mpc, r#"{"horizon": 6}"#).unwrap();
    let step_dir = d.join("step");
    let out = run(bin()
        .args(["mpc-step", "--ensemble"])
        .arg(out_dir.join("ensemble/manifest.json"))
        .arg("--state")
        .arg(&state)
        .arg("--mpc")
        .arg(&mpc)
        .args(["--step", "4", "--strategy", "md2", "--out-dir"])
        .arg(&step_dir));
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["controls"].as_array().unwrap().len(), 6);
    let u = doc["first_control"].as_array().unwrap();
    let t0s = u[0].as_f64().unwrap();
    let qtes = u[1].as_f64().unwrap();
    assert!((65.0..=85.0).contains(&t0s) && (-15.0..=15.0).contains(&qtes));
    let log = fs::read_to_string(step_dir.join("mpc_iterations.csv")).unwrap();
    assert!(log.starts_with("iteration,objective,gradient_norm,step_size"));
}

#[test]
fn run_with_a_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = small_config(d, "out");
    let mut logs = Vec::new();
    for name in ["first", "second"] {
        let out_dir = d.join(name);
        let out = run(bin()
            .env("DHS_ENSEMBLE_OUT", &out_dir)
            .args(["--seed", "5", "run", "--config"])
            .arg(&config)
            .args(["--strategy", "rb"]));
        assert!(out.status.success());
        logs.push(fs::read(out_dir.join("log_rb.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn failures_map_to_category_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let bad = d.join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(bin().args(["run", "--config"]).arg(&bad)).status.code(), Some(2));

    let unknown = d.join("unknown.json");
    fs::write(&unknown, r#"{"colour": "red"}"#).unwrap();
    assert_eq!(run(bin().args(["run", "--config"]).arg(&unknown)).status.code(), Some(2));

    let invalid = d.join("invalid.json");
    fs::write(&invalid, r#"{"experiment": {"training_days": -1.0}}"#).unwrap();
    assert_eq!(run(bin().args(["compare", "--config"]).arg(&invalid)).status.code(), Some(2));

    let missing = d.join("missing.csv");
    let out = run(bin().args(["train", "--dataset"]).arg(&missing).arg("--out").arg(d.join("m.json")));
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    assert_eq!(run(bin().args(["compare", "--config"]).arg(&bad).args(["--strategies", "xx"])).status.code(), Some(2));
}
