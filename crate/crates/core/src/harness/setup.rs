//! Default experiment: identification data from both regimes, one expert
//! per regime, input benchmarks from each expert's training data.

use serde::{Deserialize, Serialize};

use crate::data::IoDataset;
use crate::ensemble::{Ensemble, DEFAULT_EPSILON_MD};
use crate::error::{Error, Result};
use crate::mhe::MheConfig;
use crate::mpc::MpcConfig;
use crate::plant::{
    collect_regime, derive_seed, generate_scenario, PlantModel, PlantParams, Regime, Scenario, ScenarioConfig,
};
use crate::recmodel::GruModel;
use crate::stats::fit_benchmark_default;
use crate::trainer::{evaluate_fit, train_expert, FitReport, TrainConfig, TrainReport};

use super::{Controller, EstimatorMode, LoopSettings};

/// Everything that defines a seeded experiment. All randomness derives from
/// `seed`; the seeds inside the nested configs are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub plant: PlantParams,
    pub scenario: ScenarioConfig,
    /// Identification data per regime, days.
    pub training_days: f64,
    pub train: TrainConfig,
    pub mpc: MpcConfig,
    pub mhe: MheConfig,
    pub estimator: EstimatorMode,
    pub epsilon_md: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plant: PlantParams::default(),
            scenario: ScenarioConfig::default(),
            training_days: 7.0,
            train: TrainConfig::default(),
            mpc: MpcConfig::default(),
            mhe: MheConfig::default(),
            estimator: EstimatorMode::Mhe,
            epsilon_md: DEFAULT_EPSILON_MD,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.train.validate()?;
        self.mpc.validate()?;
        self.mhe.validate()?;
        if self.scenario.n_loads != self.plant.n_loads {
            return Err(Error::Config(format!(
                "scenario has {} loads, plant {}",
                self.scenario.n_loads, self.plant.n_loads
            )));
        }
        if self.scenario.sample_time != self.plant.sample_time || self.mpc.sample_time != self.plant.sample_time {
            return Err(Error::Config("plant, scenario and MPC sample times differ".into()));
        }
        if !(self.training_days > 0.0) {
            return Err(Error::Config("training days must be positive".into()));
        }
        Ok(())
    }

    /// Scenario config with its seed derived from the experiment seed.
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: derive_seed(self.seed, 3),
            ..self.scenario.clone()
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        generate_scenario(&self.scenario_config())
    }

    pub fn plant_model(&self) -> Result<PlantModel> {
        PlantModel::new(self.plant.clone())
    }

    /// Training config of the expert for `regime`.
    pub fn train_config(&self, regime: Regime) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 10 + regime.index() as u64),
            ..self.train.clone()
        }
    }

    pub fn loop_settings(&self, controller: Controller) -> LoopSettings {
        LoopSettings {
            controller,
            estimator: self.estimator,
            mpc: self.mpc.clone(),
            mhe: self.mhe.clone(),
            initial_control: vec![75.0, 0.0],
        }
    }
}

/// Identification data of one regime.
pub fn collect_training_data(config: &ExperimentConfig, regime: Regime) -> Result<IoDataset> {
    let plant = config.plant_model()?;
    collect_regime(&plant, regime, config.training_days, derive_seed(config.seed, 1 + regime.index() as u64))
}

/// Trailing validation segment the trainer holds out.
pub fn validation_segment(data: &IoDataset, fraction: f64) -> IoDataset {
    let n = data.len();
    let split = n - ((n as f64 * fraction).round() as usize).min(n);
    data.slice(split..n)
}

/// Leading training segment.
pub fn training_segment(data: &IoDataset, fraction: f64) -> IoDataset {
    let n = data.len();
    let split = n - ((n as f64 * fraction).round() as usize).min(n);
    data.slice(0..split)
}

#[derive(Debug, Clone)]
pub struct PreparedEnsemble {
    pub ensemble: Ensemble,
    /// Identification data per regime, in expert order (low, high).
    pub datasets: Vec<IoDataset>,
    pub reports: Vec<TrainReport>,
}

impl PreparedEnsemble {
    /// `fits[i][j]`: expert `i` scored on the validation segment of regime `j`.
    pub fn cross_regime_fits(&self, validation_fraction: f64, washout: usize) -> Result<Vec<Vec<FitReport>>> {
        self.ensemble
            .experts()
            .iter()
            .map(|m| {
                self.datasets
                    .iter()
                    .map(|d| evaluate_fit(m, &validation_segment(d, validation_fraction), washout))
                    .collect()
            })
            .collect()
    }
}

/// Trains one expert per regime and fits its benchmark on the inputs of the
/// expert's training segment.
pub fn prepare_ensemble(config: &ExperimentConfig) -> Result<PreparedEnsemble> {
    config.validate()?;
    let regimes = [Regime::Low, Regime::High];
    let mut datasets = Vec::with_capacity(2);
    let mut experts: Vec<GruModel> = Vec::with_capacity(2);
    let mut benchmarks = Vec::with_capacity(2);
    let mut reports = Vec::with_capacity(2);
    for regime in regimes {
        let data = collect_training_data(config, regime)?;
        let (model, report) = train_expert(&data, &config.train_config(regime))?;
        let train_part = training_segment(&data, config.train.validation_fraction);
        benchmarks.push(fit_benchmark_default(&train_part.input_dataset()?)?);
        experts.push(model);
        reports.push(report);
        datasets.push(data);
    }
    Ok(PreparedEnsemble {
        ensemble: Ensemble::new(experts, benchmarks, config.epsilon_md)?,
        datasets,
        reports,
    })
}
