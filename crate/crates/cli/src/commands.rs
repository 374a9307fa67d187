use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dhs_ensemble::data::IoDataset;
use dhs_ensemble::ensemble::{Ensemble, Strategy};
use dhs_ensemble::harness::{
    collect_training_data, compare_strategies, export_artifacts, prepare_ensemble, run_closed_loop, ComparisonTable,
    Controller, ExperimentConfig, PlantProcess,
};
use dhs_ensemble::io::{read_json, resolve_relative, write_json};
use dhs_ensemble::mpc::{shift_warm_start, solve_mpc, strategy_weights, MpcConfig, MpcProblem};
use dhs_ensemble::optim::write_iteration_log;
use dhs_ensemble::plant::{PlantParams, Scenario};
use dhs_ensemble::stats::{fit_benchmark, fit_benchmark_default};
use dhs_ensemble::trainer::{train_expert, TrainConfig};
use dhs_ensemble::Error;
use log::{info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Command, OUT_DIR_ENV};

/// Config file of `run` and `compare`. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Scenario file; generated from the seed if absent.
    pub scenario: Option<PathBuf>,
    /// Ensemble manifest; trained from scratch if absent.
    pub ensemble: Option<PathBuf>,
    pub strategy: Controller,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            scenario: None,
            ensemble: None,
            strategy: Controller::Mpc(Strategy::Md2),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Per-expert states and the previous input for `mpc-step`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepState {
    states: Vec<Vec<f64>>,
    /// Full input `[controls, loads]` applied at the previous step.
    previous_input: Vec<f64>,
    /// Previous control sequence; shifted by one stage before use.
    #[serde(default)]
    previous_controls: Option<Vec<Vec<f64>>>,
}

/// Reads a config file, reporting malformed content as a config error.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path).map_err(|e| match e {
        Error::Format { path, message } => Error::Config(format!("{}: {message}", path.display())),
        other => other,
    })
    .with_context(|| format!("reading config {}", path.display()))
}

fn output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.to_path_buf(),
    }
}

pub(crate) fn dispatch(command: Command, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Collect { plant, regime, days, out } => {
            let mut config = ExperimentConfig {
                training_days: days,
                seed: seed.unwrap_or(0),
                ..ExperimentConfig::default()
            };
            if let Some(p) = plant {
                config.plant = read_config::<PlantParams>(&p)?;
                config.plant.validate()?;
            }
            let data = collect_training_data(&config, regime)?;
            data.write_csv(&out)?;
            info!("{} samples of the {} regime written to {}", data.len(), regime.tag(), out.display());
            Ok(())
        }
        Command::Train { dataset, config, out, history } => {
            let mut tc = match config {
                Some(p) => read_config::<TrainConfig>(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                tc.seed = s;
            }
            let data = IoDataset::read_csv(&dataset)?;
            let (model, report) = train_expert(&data, &tc)?;
            model.save(&out)?;
            let history = history.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
            report.write_csv(&history)?;
            let best = &report.history[report.best_epoch];
            emit(&format!(
                "best epoch {} (train loss {:.6e}, validation loss {}); model {}, history {}\n",
                report.best_epoch,
                best.train_loss,
                best.validation_loss.map_or("-".to_string(), |v| format!("{v:.6e}")),
                out.display(),
                history.display()
            ));
            Ok(())
        }
        Command::FitBenchmark { dataset, out, regularization } => {
            let inputs = IoDataset::read_csv(&dataset)?.input_dataset()?;
            let bench = match regularization {
                Some(eps) => fit_benchmark(&inputs, eps)?,
                None => fit_benchmark_default(&inputs)?,
            };
            bench.save(&out)?;
            info!("benchmark of {} channels written to {}", bench.dim(), out.display());
            Ok(())
        }
        Command::Run { config, strategy } => {
            let (rc, dir) = load_run_config(&config, seed)?;
            let controller = strategy.unwrap_or(rc.strategy);
            let out = output_dir(&rc.output_dir);
            let (ensemble, scenario) = prepare(&rc, &dir, &out)?;
            let exp = &rc.experiment;
            let settings = exp.loop_settings(controller);
            let mut process = PlantProcess::new(exp.plant_model()?, settings.initial_control[0]);
            let log = run_closed_loop(&mut process, &scenario, &ensemble, &settings)?;
            if log.faults() > 0 {
                warn!("{} solver faults; previous control held", log.faults());
            }
            let logs = [log];
            let table = ComparisonTable::from_logs(&logs);
            export_artifacts(&logs, &table, &out)?;
            write_json(out.join("run_config.json"), &RunConfig { strategy: controller, ..rc })?;
            emit(&table.to_text());
            Ok(())
        }
        Command::Compare { config, strategies } => {
            if strategies.is_empty() {
                return Err(Error::Config("no strategies to compare".into()).into());
            }
            let (rc, dir) = load_run_config(&config, seed)?;
            let out = output_dir(&rc.output_dir);
            let (ensemble, scenario) = prepare(&rc, &dir, &out)?;
            let exp = &rc.experiment;
            let (table, logs) = compare_strategies(
                &exp.plant_model()?,
                &scenario,
                &ensemble,
                &exp.loop_settings(Controller::RuleBased),
                &strategies,
            )?;
            export_artifacts(&logs, &table, &out)?;
            write_json(out.join("run_config.json"), &rc)?;
            emit(&table.to_text());
            Ok(())
        }
        Command::MpcStep {
            ensemble,
            state,
            scenario,
            step,
            strategy,
            mpc,
            out_dir,
        } => mpc_step(&ensemble, &state, scenario.as_deref(), step, strategy, mpc.as_deref(), &output_dir(&out_dir), seed),
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Result<(RunConfig, PathBuf)> {
    let mut rc: RunConfig = read_config(path)?;
    if let Some(s) = seed {
        rc.experiment.seed = s;
    }
    rc.experiment.validate()?;
    Ok((rc, path.to_path_buf()))
}

/// Loads or trains the ensemble and loads or generates the scenario. A
/// freshly trained ensemble is saved under `<out>/ensemble/`.
fn prepare(rc: &RunConfig, config_path: &Path, out: &Path) -> Result<(Ensemble, Scenario)> {
    let ensemble = match &rc.ensemble {
        Some(p) => Ensemble::load_manifest(resolve_relative(config_path, p))?.0,
        None => {
            let prepared = prepare_ensemble(&rc.experiment)?;
            let dir = out.join("ensemble");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            prepared.ensemble.save_manifest(dir.join("manifest.json"), Strategy::Md2)?;
            for (i, report) in prepared.reports.iter().enumerate() {
                report.write_csv(dir.join(format!("loss_{}.csv", i + 1)))?;
            }
            prepared.ensemble
        }
    };
    let scenario = match &rc.scenario {
        Some(p) => Scenario::load(resolve_relative(config_path, p))?,
        None => rc.experiment.scenario()?,
    };
    Ok((ensemble, scenario))
}

#[allow(clippy::too_many_arguments)]
fn mpc_step(
    manifest: &Path,
    state: &Path,
    scenario: Option<&Path>,
    step: usize,
    strategy: Strategy,
    mpc: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let (ensemble, _) = Ensemble::load_manifest(manifest)?;
    let config = match mpc {
        Some(p) => read_config::<MpcConfig>(p)?,
        None => MpcConfig::default(),
    };
    let st: StepState = read_config(state)?;
    let scenario = match scenario {
        Some(p) => Scenario::load(p)?,
        None => ExperimentConfig {
            seed: seed.unwrap_or(0),
            ..ExperimentConfig::default()
        }
        .scenario()?,
    };
    if step >= scenario.len() {
        return Err(Error::Config(format!("step {step} is past the scenario end ({})", scenario.len())).into());
    }
    let nc = config.n_controls();
    if st.previous_input.len() < nc {
        return Err(Error::Config(format!("previous input needs at least {nc} entries")).into());
    }
    let states = st.states.iter().map(|x| DVector::from_column_slice(x)).collect();
    let weights = strategy_weights(strategy, &ensemble, &[], config.ls_window, &st.previous_input, config.horizon)?;
    let problem = MpcProblem::from_scenario(&scenario, step, &config, &ensemble, states, weights)?;
    let warm = match st.previous_controls {
        Some(prev) => shift_warm_start(&prev.iter().map(|u| DVector::from_column_slice(u)).collect::<Vec<_>>())?,
        None => vec![DVector::from_vec(config.clip(&st.previous_input[..nc])); config.horizon],
    };
    let sol = solve_mpc(&ensemble, &problem, &warm, &config)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("mpc_iterations.csv");
    write_iteration_log(&sol.log, &log_path)?;
    let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>();
    let doc = json!({
        "strategy": strategy.tag(),
        "step": step,
        "objective": sol.objective,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "solve_time": sol.solve_time,
        "first_control": sol.first_control().as_slice(),
        "controls": rows(&sol.controls),
        "weights": sol.prediction.weights.iter().map(|w| w.as_slice().to_vec()).collect::<Vec<_>>(),
        "predicted_outputs": rows(&sol.prediction.combined_outputs),
        "iteration_log": log_path,
    });
    let solution_path = out.join("mpc_solution.json");
    write_json(&solution_path, &doc)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&doc)?));
    Ok(())
}
