//! Closed-loop simulation: plant ↔ estimator ↔ controller, the rule-based
//! baseline, performance metrics and strategy comparison.

mod report;
mod setup;

pub use report::{
    export_artifacts, export_comparison, write_log_csv, write_timing_csv, ComparisonRow, ComparisonTable,
};
pub use setup::{
    collect_training_data, prepare_ensemble, training_segment, validation_segment, ExperimentConfig,
    PreparedEnsemble,
};

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, LsRecord, Strategy};
use crate::error::{check_dim, Error, Result};
use crate::mhe::{solve_mhe, MheConfig, MheState};
use crate::mpc::{shift_warm_start, solve_mpc, strategy_weights, ChannelLayout, MpcConfig, MpcProblem, SIGMA};
use crate::plant::{PlantModel, Scenario, CP_WATER, RETURN_UPPER, SUPPLY_UPPER};
use crate::recmodel::GruModel;

/// A system the loop can drive one step at a time.
pub trait Process {
    fn input_size(&self) -> usize;
    fn output_size(&self) -> usize;
    fn state(&self) -> Vec<f64>;
    /// Applies `input` for one step and returns the output measured during it.
    fn apply(&mut self, input: &[f64]) -> Result<DVector<f64>>;
}

pub struct PlantProcess {
    model: PlantModel,
    state: DVector<f64>,
}

impl PlantProcess {
    /// Plant at rest with pipes at `initial_supply`.
    pub fn new(model: PlantModel, initial_supply: f64) -> Self {
        let state = model.initial_state(initial_supply);
        Self { model, state }
    }
}

impl Process for PlantProcess {
    fn input_size(&self) -> usize {
        self.model.input_size()
    }

    fn output_size(&self) -> usize {
        self.model.output_size()
    }

    fn state(&self) -> Vec<f64> {
        self.state.as_slice().to_vec()
    }

    fn apply(&mut self, input: &[f64]) -> Result<DVector<f64>> {
        let (next, y) = self.model.step(self.state.as_slice(), input)?;
        self.state = next;
        Ok(y)
    }
}

/// An expert standing in for the plant.
pub struct ExpertProcess {
    model: GruModel,
    state: DVector<f64>,
}

impl ExpertProcess {
    pub fn new(model: GruModel, state: DVector<f64>) -> Result<Self> {
        check_dim("expert process state", model.hidden_size(), state.len())?;
        Ok(Self { model, state })
    }
}

impl Process for ExpertProcess {
    fn input_size(&self) -> usize {
        self.model.input_size()
    }

    fn output_size(&self) -> usize {
        self.model.output_size()
    }

    fn state(&self) -> Vec<f64> {
        self.state.as_slice().to_vec()
    }

    fn apply(&mut self, input: &[f64]) -> Result<DVector<f64>> {
        let (next, y) = self.model.step(self.state.as_slice(), input)?;
        self.state = next;
        Ok(y)
    }
}

/// Rule-based baseline: constant supply temperature, charge the storage when
/// power is cheap and discharge it when expensive.
pub fn rule_based_control(price: f64) -> [f64; 2] {
    let storage = if price < 0.125 {
        -7.5
    } else if price > 0.175 {
        7.5
    } else {
        0.0
    };
    [75.0, storage]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Controller {
    RuleBased,
    Mpc(Strategy),
}

impl Controller {
    pub const ALL: [Controller; 5] = [
        Controller::RuleBased,
        Controller::Mpc(Strategy::Av),
        Controller::Mpc(Strategy::Ls),
        Controller::Mpc(Strategy::Md1),
        Controller::Mpc(Strategy::Md2),
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Controller::RuleBased => "rb",
            Controller::Mpc(s) => s.tag(),
        }
    }

    pub fn label(self) -> String {
        match self {
            Controller::RuleBased => "RB".into(),
            Controller::Mpc(s) => s.label().into(),
        }
    }
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Controller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("rb") {
            return Ok(Controller::RuleBased);
        }
        Ok(Controller::Mpc(s.parse()?))
    }
}

impl Serialize for Controller {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for Controller {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Source of the expert states the controller starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Mhe,
    /// Each expert simulated from a zero state with the applied inputs.
    OpenLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSettings {
    pub controller: Controller,
    pub estimator: EstimatorMode,
    pub mpc: MpcConfig,
    pub mhe: MheConfig,
    /// Control assumed before the first step and used as the first warm start.
    pub initial_control: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStepInfo {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub solve_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheStepInfo {
    pub residual_norm: f64,
    pub noise_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub solve_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Process state before the step.
    pub state: Vec<f64>,
    /// Measured output during the step.
    pub output: Vec<f64>,
    pub control: Vec<f64>,
    pub disturbance: Vec<f64>,
    pub price: f64,
    pub supply_lower: f64,
    pub return_lower: f64,
    /// First-stage ensemble weights (MPC only).
    pub weights: Option<Vec<f64>>,
    /// Expert states the controller used.
    pub estimates: Vec<Vec<f64>>,
    /// One-step predictions `g(x̂(k), u(k))` per expert.
    pub predictions: Vec<Vec<f64>>,
    /// Scaled squared one-step errors from the controller's estimates.
    pub errors: Vec<f64>,
    /// Same from open-loop propagation.
    pub open_loop_errors: Vec<f64>,
    /// Combined first-stage prediction of the MPC.
    pub predicted_output: Option<Vec<f64>>,
    pub mpc: Option<MpcStepInfo>,
    pub mhe: Vec<MheStepInfo>,
    /// The MPC failed and the previous control was held.
    pub fault: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationLog {
    pub controller: Controller,
    pub estimator: EstimatorMode,
    pub sample_time: f64,
    pub n_experts: usize,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub layout: ChannelLayout,
    pub records: Vec<StepRecord>,
}

impl SimulationLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn faults(&self) -> usize {
        self.records.iter().filter(|r| r.fault).count()
    }

    /// Station heat output `c_p q₀ (T₀ˢ − T₀ʳ)` per step, W.
    pub fn station_power(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| {
                station_power(
                    r.output[self.layout.station_flow],
                    r.control[0],
                    r.output[self.layout.return_temperature],
                )
            })
            .collect()
    }

    /// `J`, €.
    pub fn economic_cost(&self) -> f64 {
        let prices: Vec<f64> = self.records.iter().map(|r| r.price).collect();
        economic_cost(&prices, &self.station_power(), self.sample_time)
    }

    /// `V`: squared hinge violations of supply and return temperature bounds.
    pub fn violations(&self) -> f64 {
        self.records
            .iter()
            .map(|r| {
                let supply: Vec<f64> = self.layout.supply_temperatures.iter().map(|&j| r.output[j]).collect();
                step_violation(
                    &supply,
                    r.supply_lower,
                    r.output[self.layout.return_temperature],
                    r.return_lower,
                )
            })
            .sum()
    }

    /// `e⁽ⁱ⁾(k)` from the estimates the controller used.
    pub fn one_step_errors(&self, expert: usize) -> Result<Vec<f64>> {
        self.error_column(expert, |r| &r.errors)
    }

    /// `e⁽ⁱ⁾(k)` from open-loop propagation.
    pub fn open_loop_errors(&self, expert: usize) -> Result<Vec<f64>> {
        self.error_column(expert, |r| &r.open_loop_errors)
    }

    fn error_column(&self, expert: usize, col: impl Fn(&StepRecord) -> &Vec<f64>) -> Result<Vec<f64>> {
        if expert >= self.n_experts {
            return Err(Error::InvalidInput(format!(
                "log has {} experts, asked for {expert}",
                self.n_experts
            )));
        }
        Ok(self.records.iter().map(|r| col(r)[expert]).collect())
    }

    /// MPC solve times, s.
    pub fn solve_times(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.mpc.as_ref().map(|m| m.solve_time)).collect()
    }
}

pub fn station_power(flow: f64, supply_temp: f64, return_temp: f64) -> f64 {
    CP_WATER * flow * (supply_temp - return_temp)
}

/// `Σ τ σ c(k) P₀(k)`.
pub fn economic_cost(prices: &[f64], powers: &[f64], sample_time: f64) -> f64 {
    prices.iter().zip(powers).map(|(c, p)| sample_time * SIGMA * c * p).sum()
}

/// One step of `V`.
pub fn step_violation(supply_temps: &[f64], supply_lower: f64, return_temp: f64, return_lower: f64) -> f64 {
    let hinge = |v: f64| v.max(0.0).powi(2);
    supply_temps
        .iter()
        .map(|t| hinge(supply_lower - t) + hinge(t - SUPPLY_UPPER))
        .sum::<f64>()
        + hinge(return_lower - return_temp)
        + hinge(return_temp - RETURN_UPPER)
}

/// `‖y_p − ŷ‖²` in the expert's scaled output units.
pub fn scaled_squared_error(model: &GruModel, measured: &[f64], predicted: &[f64]) -> f64 {
    let gain = model.output_scaler().gain();
    measured
        .iter()
        .zip(predicted)
        .zip(gain)
        .map(|((y, p), g)| ((y - p) / g).powi(2))
        .sum()
}

/// Mean of `series` after dropping the first `skip` entries.
pub fn mean_after(series: &[f64], skip: usize) -> f64 {
    let tail = &series[skip.min(series.len())..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Runs the loop over the whole scenario. Per step: push the last
/// measurement, estimate every expert's state, choose the control, apply it,
/// record predictions and errors.
pub fn run_closed_loop(
    process: &mut dyn Process,
    scenario: &Scenario,
    ensemble: &Ensemble,
    settings: &LoopSettings,
) -> Result<SimulationLog> {
    scenario.validate()?;
    settings.mpc.validate()?;
    settings.mhe.validate()?;
    let nc = settings.mpc.n_controls();
    check_dim("initial control", nc, settings.initial_control.len())?;
    check_dim("process inputs", ensemble.input_size(), process.input_size())?;
    check_dim("process outputs", ensemble.output_size(), process.output_size())?;
    check_dim("scenario loads", ensemble.input_size() - nc, scenario.n_loads())?;
    if scenario.sample_time != settings.mpc.sample_time {
        return Err(Error::Config("scenario and MPC sample times differ".into()));
    }
    let experts = ensemble.experts();
    let n = experts.len();
    let layout = ChannelLayout::from_output_names(experts[0].output_names())?;
    let hidden: Vec<usize> = experts.iter().map(GruModel::hidden_size).collect();

    let mut mhe_state = MheState::new(settings.mhe.horizon, &hidden)?;
    let mut open_loop: Vec<DVector<f64>> = hidden.iter().map(|&h| DVector::zeros(h)).collect();
    let initial = DVector::from_column_slice(&settings.initial_control);
    let mut warm = vec![initial.clone(); settings.mpc.horizon];
    let mut previous_control = initial;
    let mut last: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut history: Vec<LsRecord> = Vec::new();
    let mut records = Vec::with_capacity(scenario.len());

    for k in 0..scenario.len() {
        let loads = scenario.loads_at(k).to_vec();

        let mut mhe_info = Vec::new();
        let estimates: Vec<DVector<f64>> = match settings.estimator {
            EstimatorMode::Mhe => {
                if let Some((u, y)) = &last {
                    mhe_state.push_measurement(u, y)?;
                }
                let mut est = Vec::with_capacity(n);
                for (i, model) in experts.iter().enumerate() {
                    let sol = solve_mhe(model, &mut mhe_state, i, &settings.mhe)?;
                    mhe_info.push(MheStepInfo {
                        residual_norm: sol.residual_norm,
                        noise_norm: sol.noise_norm,
                        iterations: sol.iterations,
                        converged: sol.converged,
                        solve_time: sol.solve_time,
                    });
                    est.push(sol.estimate);
                }
                est
            }
            EstimatorMode::OpenLoop => open_loop.clone(),
        };

        let mut weights = None;
        let mut predicted_output = None;
        let mut mpc_info = None;
        let mut fault = false;
        let control: DVector<f64> = match settings.controller {
            Controller::RuleBased => DVector::from_row_slice(&rule_based_control(scenario.price_at(k))),
            Controller::Mpc(strategy) => {
                let previous_input = match &last {
                    Some((u, _)) => u.clone(),
                    None => {
                        let mut u = previous_control.as_slice().to_vec();
                        u.extend_from_slice(&loads);
                        u
                    }
                };
                let plan = strategy_weights(
                    strategy,
                    ensemble,
                    &history,
                    settings.mpc.ls_window,
                    &previous_input,
                    settings.mpc.horizon,
                )?;
                let problem =
                    MpcProblem::from_scenario(scenario, k, &settings.mpc, ensemble, estimates.clone(), plan)?;
                match solve_mpc(ensemble, &problem, &warm, &settings.mpc) {
                    Ok(sol) => {
                        weights = Some(sol.prediction.weights[0].as_slice().to_vec());
                        predicted_output = Some(sol.prediction.combined_outputs[0].as_slice().to_vec());
                        mpc_info = Some(MpcStepInfo {
                            objective: sol.objective,
                            iterations: sol.iterations,
                            converged: sol.converged,
                            solve_time: sol.solve_time,
                        });
                        warm = shift_warm_start(&sol.controls)?;
                        sol.controls[0].clone()
                    }
                    Err(e) => {
                        warn!("step {k}: MPC failed ({e}); holding the previous control");
                        fault = true;
                        warm = shift_warm_start(&warm)?;
                        previous_control.clone()
                    }
                }
            }
        };

        let mut input = control.as_slice().to_vec();
        input.extend_from_slice(&loads);
        let state = process.state();
        let measured = process.apply(&input)?;

        let mut predictions = Vec::with_capacity(n);
        let mut errors = Vec::with_capacity(n);
        let mut open_loop_errors = Vec::with_capacity(n);
        for (i, model) in experts.iter().enumerate() {
            let (_, y_hat) = model.step(estimates[i].as_slice(), &input)?;
            errors.push(scaled_squared_error(model, measured.as_slice(), y_hat.as_slice()));
            let (x_next, y_ol) = model.step(open_loop[i].as_slice(), &input)?;
            open_loop_errors.push(scaled_squared_error(model, measured.as_slice(), y_ol.as_slice()));
            open_loop[i] = x_next;
            predictions.push(y_hat);
        }
        history.push(LsRecord {
            measured: measured.clone(),
            predictions: predictions.clone(),
        });
        if history.len() > settings.mpc.ls_window.max(1) {
            history.remove(0);
        }

        records.push(StepRecord {
            step: k,
            state,
            output: measured.as_slice().to_vec(),
            control: control.as_slice().to_vec(),
            disturbance: loads,
            price: scenario.price_at(k),
            supply_lower: scenario.supply_lower_at(k),
            return_lower: scenario.return_lower_at(k),
            weights,
            estimates: estimates.iter().map(|x| x.as_slice().to_vec()).collect(),
            predictions: predictions.iter().map(|y| y.as_slice().to_vec()).collect(),
            errors,
            open_loop_errors,
            predicted_output,
            mpc: mpc_info,
            mhe: mhe_info,
            fault,
        });
        previous_control = control;
        last = Some((input, measured.as_slice().to_vec()));
    }

    let faults = records.iter().filter(|r| r.fault).count();
    if faults > 0 {
        warn!("{} run finished with {faults} held controls", settings.controller);
    }
    Ok(SimulationLog {
        controller: settings.controller,
        estimator: settings.estimator,
        sample_time: scenario.sample_time,
        n_experts: n,
        input_names: experts[0].input_names().to_vec(),
        output_names: experts[0].output_names().to_vec(),
        layout,
        records,
    })
}

/// Runs every controller on a fresh copy of the plant and tabulates
/// `J`, `V` and MPC solve times.
pub fn compare_strategies(
    plant: &PlantModel,
    scenario: &Scenario,
    ensemble: &Ensemble,
    base: &LoopSettings,
    controllers: &[Controller],
) -> Result<(ComparisonTable, Vec<SimulationLog>)> {
    let mut logs = Vec::with_capacity(controllers.len());
    for &c in controllers {
        let settings = LoopSettings {
            controller: c,
            ..base.clone()
        };
        let mut process = PlantProcess::new(plant.clone(), base.initial_control[0]);
        logs.push(run_closed_loop(&mut process, scenario, ensemble, &settings)?);
    }
    Ok((ComparisonTable::from_logs(&logs), logs))
}
