//! Economic receding-horizon controller over an expert ensemble.
//!
//! The decision variables are the controllable inputs (supply temperature
//! and storage flow) over `H` steps. Every expert is rolled out from its
//! estimated state with the controls and the load forecast; the combined
//! prediction `Σ λᵢ(h) yᵢ(h)` enters the economic stage cost and squared
//! hinge penalties on the output bounds. The cost runs over `H + 1` stages;
//! the last one holds the final control and disturbance.
//!
//! Under MD-2 the weights are re-evaluated from each stage's input inside
//! the objective and differentiated through; the other strategies use
//! weights fixed before the solve.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    md_weights_with_jacobian, weights_av, weights_ls, weights_md1, Ensemble, LsRecord, Strategy,
    WeightVector, DEFAULT_LS_WINDOW,
};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::optim::{minimize_box, IterationRecord, Objective, SolverSettings};
use crate::plant::{Scenario, CP_WATER, RETURN_UPPER, SUPPLY_UPPER};
use crate::recmodel::RolloutTape;

/// W·s → kWh.
pub const SIGMA: f64 = 1.0 / 3.6e6;

/// `τ σ c c_p q₀ (T₀ˢ − T₀ʳ)`, in €.
pub fn stage_cost(supply_temp: f64, return_temp: f64, flow: f64, price: f64, sample_time: f64) -> f64 {
    sample_time * SIGMA * price * CP_WATER * flow * (supply_temp - return_temp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Box on `[T0_s, q_tes]`.
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
    /// Weight on squared output-bound violations, € per squared unit.
    pub penalty: f64,
    pub station_flow_lower: f64,
    pub station_flow_upper: f64,
    pub sample_time: f64,
    pub ls_window: usize,
    pub solver: SolverSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            control_lower: vec![65.0, -15.0],
            control_upper: vec![85.0, 15.0],
            penalty: 1e3,
            station_flow_lower: 2.0,
            station_flow_upper: 25.0,
            sample_time: 300.0,
            ls_window: DEFAULT_LS_WINDOW,
            solver: SolverSettings::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be at least 1".into()));
        }
        check_dim("control bounds", self.control_lower.len(), self.control_upper.len())?;
        if self
            .control_lower
            .iter()
            .zip(&self.control_upper)
            .any(|(l, h)| !(l < h))
        {
            return Err(Error::Config("control bounds need lo < hi".into()));
        }
        if !(self.penalty > 0.0) || !(self.sample_time > 0.0) {
            return Err(Error::Config("penalty and sample time must be positive".into()));
        }
        if !(self.station_flow_lower < self.station_flow_upper) {
            return Err(Error::Config("station flow bounds need lo < hi".into()));
        }
        self.solver.validate()
    }

    pub fn n_controls(&self) -> usize {
        self.control_lower.len()
    }

    /// Clips a control vector into the box.
    pub fn clip(&self, control: &[f64]) -> Vec<f64> {
        control
            .iter()
            .enumerate()
            .map(|(i, v)| v.max(self.control_lower[i]).min(self.control_upper[i]))
            .collect()
    }
}

/// Where the economically relevant channels sit in the expert outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    pub return_temperature: usize,
    pub station_flow: usize,
    pub supply_temperatures: Vec<usize>,
}

impl ChannelLayout {
    /// Finds `T0_r`, `q0` and every `T<j>_s` by name.
    pub fn from_output_names(names: &[String]) -> Result<Self> {
        let find = |n: &str| {
            names
                .iter()
                .position(|s| s == n)
                .ok_or_else(|| Error::Config(format!("outputs lack channel `{n}`")))
        };
        let supply_temperatures: Vec<usize> = names
            .iter()
            .enumerate()
            .filter(|(_, s)| s.starts_with('T') && s.ends_with("_s") && s.as_str() != "T0_s")
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            return_temperature: find("T0_r")?,
            station_flow: find("q0")?,
            supply_temperatures,
        })
    }
}

/// Per-channel output bounds at one stage (infinite where unconstrained).
#[derive(Debug, Clone, PartialEq)]
pub struct StageBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StageBounds {
    pub fn unconstrained(ny: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; ny],
            upper: vec![f64::INFINITY; ny],
        }
    }

    /// Bounds at scenario step `k`: return temperature, station flow and
    /// every substation supply temperature.
    pub fn from_scenario(scenario: &Scenario, k: usize, layout: &ChannelLayout, ny: usize, config: &MpcConfig) -> Self {
        let mut b = Self::unconstrained(ny);
        b.lower[layout.return_temperature] = scenario.return_lower_at(k);
        b.upper[layout.return_temperature] = RETURN_UPPER;
        b.lower[layout.station_flow] = config.station_flow_lower;
        b.upper[layout.station_flow] = config.station_flow_upper;
        for &j in &layout.supply_temperatures {
            b.lower[j] = scenario.supply_lower_at(k);
            b.upper[j] = SUPPLY_UPPER;
        }
        b
    }
}

/// How the ensemble weights enter the objective.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightPlan {
    /// One weight vector per stage (`H + 1`).
    Fixed(Vec<WeightVector>),
    /// Evaluated from each stage's input inside the objective.
    Mahalanobis,
}

/// Weight sequence for a strategy. `previous_input` is the full input
/// applied at the previous step; `history` feeds the LS fit.
pub fn strategy_weights(
    strategy: Strategy,
    ensemble: &Ensemble,
    history: &[LsRecord],
    ls_window: usize,
    previous_input: &[f64],
    horizon: usize,
) -> Result<WeightPlan> {
    let stages = horizon + 1;
    Ok(match strategy {
        Strategy::Av => WeightPlan::Fixed(vec![weights_av(ensemble.len())?; stages]),
        Strategy::Ls => {
            let w = weights_ls(history, ls_window, ensemble.len())?.weights;
            WeightPlan::Fixed(vec![w; stages])
        }
        Strategy::Md1 => WeightPlan::Fixed(weights_md1(ensemble, previous_input, stages)?),
        Strategy::Md2 => WeightPlan::Mahalanobis,
    })
}

/// Everything one MPC solve needs besides the controls.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    /// Per-expert state estimates at the current step.
    pub initial_states: Vec<DVector<f64>>,
    /// Disturbance (load) forecast, at least `H` entries.
    pub disturbances: Vec<Vec<f64>>,
    /// Price per stage, at least `H + 1` entries.
    pub price: Vec<f64>,
    /// Output bounds per stage, at least `H + 1` entries.
    pub bounds: Vec<StageBounds>,
    pub weights: WeightPlan,
    pub layout: ChannelLayout,
}

impl MpcProblem {
    /// Slices the scenario from step `k` (values past its end are held).
    pub fn from_scenario(
        scenario: &Scenario,
        k: usize,
        config: &MpcConfig,
        ensemble: &Ensemble,
        initial_states: Vec<DVector<f64>>,
        weights: WeightPlan,
    ) -> Result<Self> {
        let layout = ChannelLayout::from_output_names(ensemble.experts()[0].output_names())?;
        let h = config.horizon;
        let ny = ensemble.output_size();
        Ok(Self {
            initial_states,
            disturbances: (k..k + h).map(|i| scenario.loads_at(i).to_vec()).collect(),
            price: (k..=k + h).map(|i| scenario.price_at(i)).collect(),
            bounds: (k..=k + h)
                .map(|i| StageBounds::from_scenario(scenario, i, &layout, ny, config))
                .collect(),
            weights,
            layout,
        })
    }
}

/// Differentiable MPC objective over controls normalized to `[0, 1]`.
pub struct MpcObjective<'a> {
    ensemble: &'a Ensemble,
    problem: &'a MpcProblem,
    config: &'a MpcConfig,
    nu: usize,
    nc: usize,
    stages: usize,
}

/// Predictions of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub objective: f64,
    /// Per expert, per stage (`H + 1`), physical units.
    pub expert_outputs: Vec<Vec<DVector<f64>>>,
    pub combined_outputs: Vec<DVector<f64>>,
    pub weights: Vec<WeightVector>,
}

impl<'a> MpcObjective<'a> {
    pub fn new(ensemble: &'a Ensemble, problem: &'a MpcProblem, config: &'a MpcConfig) -> Result<Self> {
        config.validate()?;
        let h = config.horizon;
        let nu = ensemble.input_size();
        let nc = config.n_controls();
        if nc > nu {
            return Err(Error::Config("more controls than expert inputs".into()));
        }
        check_dim("MPC initial states", ensemble.len(), problem.initial_states.len())?;
        for (x, e) in problem.initial_states.iter().zip(ensemble.experts()) {
            check_dim("MPC initial state", e.hidden_size(), x.len())?;
            check_finite("MPC initial state", x.as_slice())?;
            if x.iter().any(|v| v.abs() > 1.0) {
                return Err(Error::InvalidInput("MPC initial state outside [-1, 1]".into()));
            }
        }
        if problem.disturbances.len() < h || problem.price.len() < h + 1 || problem.bounds.len() < h + 1 {
            return Err(Error::InvalidInput(format!("forecast shorter than horizon {h}")));
        }
        for d in &problem.disturbances[..h] {
            check_dim("disturbance forecast", nu - nc, d.len())?;
        }
        if let WeightPlan::Fixed(w) = &problem.weights {
            if w.len() < h + 1 {
                return Err(Error::InvalidInput("weight sequence shorter than H + 1".into()));
            }
            for v in w {
                check_dim("stage weights", ensemble.len(), v.len())?;
            }
        }
        Ok(Self {
            ensemble,
            problem,
            config,
            nu,
            nc,
            stages: h + 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.horizon * self.nc
    }

    /// Physical controls (`H × n_c`, row-major) from normalized ones.
    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        let (lo, hi) = (&self.config.control_lower, &self.config.control_upper);
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                let c = i % self.nc;
                lo[c] + (hi[c] - lo[c]) * x
            })
            .collect()
    }

    pub fn normalize(&self, u: &[f64]) -> Vec<f64> {
        let (lo, hi) = (&self.config.control_lower, &self.config.control_upper);
        u.iter()
            .enumerate()
            .map(|(i, x)| {
                let c = i % self.nc;
                (x - lo[c]) / (hi[c] - lo[c])
            })
            .collect()
    }

    /// Full expert inputs for all `H + 1` stages.
    fn stage_inputs(&self, controls: &[f64]) -> Vec<f64> {
        let h = self.config.horizon;
        let mut u = Vec::with_capacity(self.stages * self.nu);
        for s in 0..self.stages {
            let held = s.min(h - 1);
            u.extend_from_slice(&controls[held * self.nc..(held + 1) * self.nc]);
            u.extend_from_slice(&self.problem.disturbances[held]);
        }
        u
    }

    fn rollouts(&self, inputs: &[f64]) -> Vec<RolloutTape> {
        self.ensemble
            .experts()
            .iter()
            .zip(&self.problem.initial_states)
            .map(|(e, x0)| e.forward_flat(x0.as_slice(), inputs, None))
            .collect()
    }

    /// Evaluates the objective at normalized controls `v`; with `grad`
    /// also its gradient.
    fn evaluate(&self, v: &[f64], grad: Option<&mut [f64]>, keep: bool) -> (f64, Option<Prediction>) {
        let n = self.ensemble.len();
        let (nu, nc, stages) = (self.nu, self.nc, self.stages);
        let ny = self.ensemble.output_size();
        let controls = self.denormalize(v);
        let inputs = self.stage_inputs(&controls);
        let tapes = self.rollouts(&inputs);
        let experts = self.ensemble.experts();
        let outputs: Vec<Vec<Vec<f64>>> = tapes
            .iter()
            .zip(experts)
            .map(|(t, e)| (0..stages).map(|s| t.output(s, e.output_scaler())).collect())
            .collect();

        let mut lambda = vec![0.0; stages * n];
        let mut jac: Vec<DMatrix<f64>> = Vec::new();
        match &self.problem.weights {
            WeightPlan::Fixed(w) => {
                for s in 0..stages {
                    lambda[s * n..(s + 1) * n].copy_from_slice(w[s].as_slice());
                }
            }
            WeightPlan::Mahalanobis => {
                for s in 0..stages {
                    let mut j = DMatrix::zeros(n, nu);
                    md_weights_with_jacobian(
                        self.ensemble,
                        &inputs[s * nu..(s + 1) * nu],
                        &mut lambda[s * n..(s + 1) * n],
                        &mut j,
                    );
                    jac.push(j);
                }
            }
        }

        let lay = &self.problem.layout;
        let tau = self.config.sample_time;
        let rho = self.config.penalty;
        let mut total = 0.0;
        let mut combined = vec![vec![0.0; ny]; stages];
        let mut a_y = vec![vec![0.0; ny]; stages];
        let mut a_supply = vec![0.0; stages];
        for s in 0..stages {
            let y = &mut combined[s];
            for i in 0..n {
                let l = lambda[s * n + i];
                for c in 0..ny {
                    y[c] += l * outputs[i][s][c];
                }
            }
            let t0s = inputs[s * nu];
            let (t0r, q0) = (y[lay.return_temperature], y[lay.station_flow]);
            let k = tau * SIGMA * self.problem.price[s] * CP_WATER;
            total += k * q0 * (t0s - t0r);
            a_y[s][lay.station_flow] += k * (t0s - t0r);
            a_y[s][lay.return_temperature] -= k * q0;
            a_supply[s] = k * q0;
            let b = &self.problem.bounds[s];
            for c in 0..ny {
                let under = b.lower[c] - y[c];
                if under > 0.0 {
                    total += rho * under * under;
                    a_y[s][c] -= 2.0 * rho * under;
                }
                let over = y[c] - b.upper[c];
                if over > 0.0 {
                    total += rho * over * over;
                    a_y[s][c] += 2.0 * rho * over;
                }
            }
        }

        if let Some(grad) = grad {
            let h = self.config.horizon;
            // adjoint of every stage input
            let mut a_in = vec![0.0; stages * nu];
            for s in 0..stages {
                a_in[s * nu] += a_supply[s];
            }
            for (i, (tape, e)) in tapes.iter().zip(experts).enumerate() {
                let mut out_adj = vec![0.0; stages * ny];
                for s in 0..stages {
                    let l = lambda[s * n + i];
                    for c in 0..ny {
                        out_adj[s * ny + c] = l * a_y[s][c];
                    }
                }
                let g = e.backward_flat(tape, &out_adj, None, None);
                for (a, gi) in a_in.iter_mut().zip(&g.inputs) {
                    *a += gi;
                }
            }
            if !jac.is_empty() {
                for s in 0..stages {
                    for i in 0..n {
                        let dl: f64 = (0..ny).map(|c| a_y[s][c] * outputs[i][s][c]).sum();
                        if dl != 0.0 {
                            for col in 0..nu {
                                a_in[s * nu + col] += dl * jac[s][(i, col)];
                            }
                        }
                    }
                }
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            for s in 0..stages {
                let held = s.min(h - 1);
                for c in 0..nc {
                    grad[held * nc + c] += a_in[s * nu + c];
                }
            }
            for (i, g) in grad.iter_mut().enumerate() {
                let c = i % nc;
                *g *= self.config.control_upper[c] - self.config.control_lower[c];
            }
        }

        let prediction = keep.then(|| Prediction {
            objective: total,
            expert_outputs: outputs
                .iter()
                .map(|o| o.iter().map(|y| DVector::from_column_slice(y)).collect())
                .collect(),
            combined_outputs: combined.iter().map(|y| DVector::from_column_slice(y)).collect(),
            weights: (0..stages)
                .map(|s| WeightVector::new(DVector::from_column_slice(&lambda[s * n..(s + 1) * n])))
                .collect::<Result<Vec<_>>>()
                .unwrap_or_default(),
        });
        (total, prediction)
    }

    /// Objective and predictions at physical controls (`H × n_c`, row-major).
    pub fn predict(&self, controls: &[f64]) -> Result<Prediction> {
        check_dim("MPC controls", self.dim(), controls.len())?;
        let v = self.normalize(controls);
        Ok(self.evaluate(&v, None, true).1.expect("prediction requested"))
    }
}

impl Objective for MpcObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None, false).0
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(x, Some(grad), false).0
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Optimal controls `ũ(k … k+H−1)`, physical units.
    pub controls: Vec<DVector<f64>>,
    pub prediction: Prediction,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub solve_time: f64,
    pub log: Vec<IterationRecord>,
}

impl MpcSolution {
    pub fn first_control(&self) -> &DVector<f64> {
        &self.controls[0]
    }
}

/// Solves the problem from `warm_start` (projected into the control box).
pub fn solve_mpc(
    ensemble: &Ensemble,
    problem: &MpcProblem,
    warm_start: &[DVector<f64>],
    config: &MpcConfig,
) -> Result<MpcSolution> {
    let start = Instant::now();
    let objective = MpcObjective::new(ensemble, problem, config)?;
    let nc = config.n_controls();
    check_dim("warm start length", config.horizon, warm_start.len())?;
    let mut flat = Vec::with_capacity(objective.dim());
    for u in warm_start {
        check_dim("warm start control", nc, u.len())?;
        flat.extend_from_slice(u.as_slice());
    }
    check_finite("warm start", &flat)?;
    let v0: Vec<f64> = objective.normalize(&flat);
    let n = v0.len();
    let result = minimize_box(&objective, &v0, &vec![0.0; n], &vec![1.0; n], &config.solver)?;
    let mut physical = objective.denormalize(&result.x);
    // clip away rounding in the affine map so the box holds exactly
    for (i, u) in physical.iter_mut().enumerate() {
        let c = i % nc;
        *u = u.max(config.control_lower[c]).min(config.control_upper[c]);
    }
    let prediction = objective.predict(&physical)?;
    Ok(MpcSolution {
        controls: physical.chunks(nc).map(DVector::from_column_slice).collect(),
        objective: prediction.objective,
        prediction,
        iterations: result.iterations,
        converged: result.converged,
        solve_time: start.elapsed().as_secs_f64(),
        log: result.log,
    })
}

/// Drops the first control and repeats the last.
pub fn shift_warm_start(previous: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let last = previous
        .last()
        .ok_or_else(|| Error::InvalidInput("cannot shift an empty control sequence".into()))?;
    let mut out: Vec<DVector<f64>> = previous[1..].to_vec();
    out.push(last.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recmodel::{AffineScaler, GruModel};
    use crate::stats::BenchmarkStats;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn output_names() -> Vec<String> {
        ["T0_r", "q0", "T1_s"].iter().map(|s| s.to_string()).collect()
    }

    /// Small random ensemble on inputs `[T0_s, q_tes, P1_c]` and outputs
    /// `[T0_r, q0, T1_s]` with plant-like scalings.
    pub(crate) fn small_ensemble(n: usize, hidden: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_scaler = AffineScaler::new(vec![75.0, 0.0, 100e3], vec![10.0, 15.0, 50e3]).unwrap();
        let out_scaler = AffineScaler::new(vec![55.0, 6.0, 72.0], vec![5.0, 4.0, 8.0]).unwrap();
        let experts = (0..n)
            .map(|i| {
                let mut m = GruModel::init(hidden, in_scaler.clone(), out_scaler.clone(), seed + i as u64).unwrap();
                m.set_channel_names(
                    vec!["T0_s".into(), "q_tes".into(), "P1_c".into()],
                    output_names(),
                )
                .unwrap();
                m
            })
            .collect();
        let benches = (0..n)
            .map(|_| {
                let mean = DVector::from_vec(vec![
                    rng.random_range(65.0..85.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(50e3..150e3),
                ]);
                let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![30.0, 10.0, 1e9]));
                BenchmarkStats::from_parts(vec!["T0_s".into(), "q_tes".into(), "P1_c".into()], mean, cov, 0.0).unwrap()
            })
            .collect();
        Ensemble::new(experts, benches, 1e-6).unwrap()
    }

    fn problem(ens: &Ensemble, h: usize, weights: WeightPlan, price: f64, bounded: bool, seed: u64) -> MpcProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = ChannelLayout::from_output_names(&output_names()).unwrap();
        let bounds = (0..=h)
            .map(|_| {
                if bounded {
                    StageBounds {
                        lower: vec![56.0, 2.0, 73.0],
                        upper: vec![75.0, 25.0, 85.0],
                    }
                } else {
                    StageBounds::unconstrained(3)
                }
            })
            .collect();
        MpcProblem {
            initial_states: ens
                .experts()
                .iter()
                .map(|e| DVector::from_fn(e.hidden_size(), |_, _| rng.random_range(-0.8..0.8)))
                .collect(),
            disturbances: (0..h).map(|_| vec![rng.random_range(50e3..150e3)]).collect(),
            price: (0..=h).map(|_| price).collect(),
            bounds,
            weights,
            layout,
        }
    }

    fn config(h: usize) -> MpcConfig {
        MpcConfig {
            horizon: h,
            ..MpcConfig::default()
        }
    }

    #[test]
    fn stage_cost_examples() {
        assert_eq!(stage_cost(70.0, 50.0, 0.0, 0.15, 300.0), 0.0);
        assert_eq!(stage_cost(60.0, 60.0, 10.0, 0.15, 300.0), 0.0);
        assert_relative_eq!(stage_cost(70.0, 50.0, 10.0, 0.15, 300.0), 10.465, epsilon = 1e-12);
    }

    #[test]
    fn zero_price_and_no_bounds_gives_zero_objective() {
        let ens = small_ensemble(2, 3, 1);
        let p = problem(&ens, 4, WeightPlan::Mahalanobis, 0.0, false, 2);
        let c = config(4);
        let obj = MpcObjective::new(&ens, &p, &c).unwrap();
        let mut g = vec![1.0; obj.dim()];
        assert_eq!(obj.value_and_gradient(&[0.3; 8], &mut g), 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        let warm = vec![DVector::from_vec(vec![70.0, 1.0]); 4];
        let sol = solve_mpc(&ens, &p, &warm, &c).unwrap();
        assert!(sol.iterations <= 1);
        assert_eq!(sol.controls, warm);
    }

    #[test]
    fn md2_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let ens = small_ensemble(2, 3, 10 + seed);
            let p = problem(&ens, 4, WeightPlan::Mahalanobis, 0.15, true, seed);
            let c = config(4);
            let obj = MpcObjective::new(&ens, &p, &c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(0.1..0.9)).collect();
            let mut g = vec![0.0; v.len()];
            obj.value_and_gradient(&v, &mut g);
            let h = 1e-6;
            for i in 0..v.len() {
                let mut a = v.clone();
                a[i] += h;
                let mut b = v.clone();
                b[i] -= h;
                let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
                assert!(
                    (g[i] - fd).abs() <= 1e-5 * g[i].abs().max(fd.abs()).max(1e-3),
                    "seed {seed} coord {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn single_expert_objective_ignores_strategy() {
        let ens = small_ensemble(1, 3, 4);
        let c = config(5);
        let fixed = problem(&ens, 5, WeightPlan::Fixed(vec![weights_av(1).unwrap(); 6]), 0.15, true, 3);
        let mut md = fixed.clone();
        md.weights = WeightPlan::Mahalanobis;
        let warm = vec![DVector::from_vec(vec![75.0, 0.0]); 5];
        let a = solve_mpc(&ens, &fixed, &warm, &c).unwrap();
        let b = solve_mpc(&ens, &md, &warm, &c).unwrap();
        assert_eq!(a.objective, b.objective);
        for (x, y) in a.controls.iter().zip(&b.controls) {
            assert!((x - y).amax() <= 1e-8);
        }
    }

    #[test]
    fn solver_beats_quantized_grid() {
        let ens = small_ensemble(2, 3, 21);
        let h = 3;
        let p = problem(&ens, h, WeightPlan::Mahalanobis, 0.2, true, 5);
        let c = MpcConfig {
            solver: SolverSettings {
                max_iterations: 2000,
                tolerance: 1e-9,
                ..SolverSettings::default()
            },
            ..config(h)
        };
        let obj = MpcObjective::new(&ens, &p, &c).unwrap();
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << (h * 2)) {
            let v: Vec<f64> = (0..h * 2).map(|b| f64::from((mask >> b) & 1)).collect();
            best = best.min(obj.value(&v));
        }
        let warm = vec![DVector::from_vec(vec![75.0, 0.0]); h];
        let sol = solve_mpc(&ens, &p, &warm, &c).unwrap();
        assert!(sol.objective <= best + 1e-6, "{} vs grid {best}", sol.objective);
    }

    #[test]
    fn controls_stay_in_box_and_objective_does_not_increase() {
        let ens = small_ensemble(2, 4, 8);
        let c = config(6);
        let p = problem(&ens, 6, WeightPlan::Mahalanobis, 0.2, true, 9);
        let warm = vec![DVector::from_vec(vec![100.0, -40.0]); 6];
        let sol = solve_mpc(&ens, &p, &warm, &c).unwrap();
        for u in &sol.controls {
            assert!((65.0..=85.0).contains(&u[0]) && (-15.0..=15.0).contains(&u[1]));
        }
        for w in sol.log.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
        for w in &sol.prediction.weights {
            assert!((w.values().sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_problems() {
        let ens = small_ensemble(2, 3, 1);
        let c = config(4);
        let mut p = problem(&ens, 4, WeightPlan::Mahalanobis, 0.1, true, 1);
        p.price.truncate(3);
        assert!(MpcObjective::new(&ens, &p, &c).is_err());
        let mut p = problem(&ens, 4, WeightPlan::Mahalanobis, 0.1, true, 1);
        p.initial_states[0][0] = 1.5;
        assert!(MpcObjective::new(&ens, &p, &c).is_err());
    }

    #[test]
    fn shift_examples() {
        let v = |x: f64| DVector::from_vec(vec![x]);
        assert_eq!(shift_warm_start(&[v(1.0), v(2.0), v(3.0)]).unwrap(), vec![v(2.0), v(3.0), v(3.0)]);
        assert_eq!(shift_warm_start(&vec![v(4.0); 3]).unwrap(), vec![v(4.0); 3]);
        assert_eq!(shift_warm_start(&[v(5.0)]).unwrap(), vec![v(5.0)]);
        assert!(shift_warm_start(&[]).is_err());
    }

    #[test]
    fn strategy_weight_examples() {
        let ens = small_ensemble(2, 3, 2);
        let prev = ens.benchmarks()[0].mean().as_slice().to_vec();
        match strategy_weights(Strategy::Av, &ens, &[], 100, &prev, 3).unwrap() {
            WeightPlan::Fixed(w) => assert!(w.iter().all(|v| v.as_slice() == [0.5, 0.5])),
            _ => panic!(),
        }
        match strategy_weights(Strategy::Md1, &ens, &[], 100, &prev, 3).unwrap() {
            WeightPlan::Fixed(w) => {
                assert_eq!(w.len(), 4);
                assert!(w[0].as_slice()[0] > 0.99);
            }
            _ => panic!(),
        }
        assert_eq!(
            strategy_weights(Strategy::Md2, &ens, &[], 100, &prev, 3).unwrap(),
            WeightPlan::Mahalanobis
        );
        let single = small_ensemble(1, 3, 2);
        for s in [Strategy::Av, Strategy::Ls, Strategy::Md1] {
            match strategy_weights(s, &single, &[], 100, &prev, 3).unwrap() {
                WeightPlan::Fixed(w) => assert!(w.iter().all(|v| v.as_slice() == [1.0])),
                _ => panic!(),
            }
        }
    }
}
