use log::debug;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

pub const CP_WATER: f64 = 4186.0;

/// Physical parameters of the synthetic network. Per-load vectors have one
/// entry per load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    pub sample_time: f64,
    /// Specific heat of water, J/(kg·K).
    pub cp: f64,
    pub n_loads: usize,
    /// Supply transport time constants, s.
    pub pipe_lag: Vec<f64>,
    /// Pipe heat-loss conductance to ground, W/K.
    pub loss_conductance: Vec<f64>,
    pub ground_temperature: f64,
    /// Constant bypass flow at each substation, kg/s.
    pub bypass_flow: Vec<f64>,
    /// Heat-exchanger effectiveness `η(P) = eta0 - eta1 (P/p_ref)²`, floored at `eta_min`.
    pub eta0: f64,
    pub eta1: f64,
    pub p_ref: f64,
    pub eta_min: f64,
    /// Consumer-side reference temperature the exchangers work against, °C.
    pub consumer_reference: f64,
    /// Time constant of the return-line mixing, s.
    pub return_lag: f64,
    /// Storage capacity, J.
    pub storage_capacity: f64,
    pub initial_storage_fraction: f64,
    /// The station always circulates at least this much, kg/s.
    pub min_station_flow: f64,
    /// Smallest admissible supply-to-reference temperature difference, K.
    pub min_temperature_difference: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self::with_loads(2)
    }
}

impl PlantParams {
    pub fn with_loads(n_loads: usize) -> Self {
        Self {
            sample_time: 300.0,
            cp: CP_WATER,
            n_loads,
            pipe_lag: (0..n_loads).map(|j| 900.0 * (j + 1) as f64).collect(),
            loss_conductance: vec![250.0; n_loads],
            ground_temperature: 10.0,
            bypass_flow: vec![0.5; n_loads],
            eta0: 0.9,
            eta1: 0.25,
            p_ref: 200e3,
            eta_min: 0.05,
            consumer_reference: 50.0,
            return_lag: 600.0,
            storage_capacity: 1e11,
            initial_storage_fraction: 0.5,
            min_station_flow: 1.0,
            min_temperature_difference: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_loads == 0 || self.n_loads > 5 {
            return bad(format!("n_loads must be in 1..=5, got {}", self.n_loads));
        }
        for (name, v) in [
            ("pipe_lag", &self.pipe_lag),
            ("loss_conductance", &self.loss_conductance),
            ("bypass_flow", &self.bypass_flow),
        ] {
            if v.len() != self.n_loads {
                return bad(format!("{name} needs {} entries, has {}", self.n_loads, v.len()));
            }
        }
        if !(self.sample_time > 0.0) || !(self.cp > 0.0) {
            return bad("sample_time and cp must be positive".into());
        }
        if self.pipe_lag.iter().any(|l| !(*l >= self.sample_time)) || !(self.return_lag >= self.sample_time) {
            return bad("lags must be at least one sample time".into());
        }
        if self.loss_conductance.iter().any(|g| !(*g >= 0.0)) || self.bypass_flow.iter().any(|q| !(*q > 0.0)) {
            return bad("loss conductances must be non-negative and bypass flows positive".into());
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta0 && self.eta0 <= 1.0) || !(self.eta1 >= 0.0) || !(self.p_ref > 0.0) {
            return bad("effectiveness curve must stay within (0, 1]".into());
        }
        if !(self.storage_capacity > 0.0) || !(0.0..=1.0).contains(&self.initial_storage_fraction) {
            return bad("storage capacity must be positive, initial fraction in [0, 1]".into());
        }
        if !(self.min_station_flow >= 0.0) || !(self.min_temperature_difference > 0.0) {
            return bad("flow and temperature floors must be positive".into());
        }
        Ok(())
    }
}

/// Result of one plant step with the internal quantities tests and logs need.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub next_state: DVector<f64>,
    pub output: DVector<f64>,
    /// Storage flow actually realized after capacity and station-flow limits.
    pub storage_flow: f64,
    /// A substation hit the temperature-difference floor.
    pub saturated: bool,
}

/// Network of `n` substations fed through lagged supply pipes, with a storage
/// tank at the station.
///
/// State: `[T0_r, T_pipe_1..n, E_tes]`. Input: `[T0_s, q_tes, P1_c..Pn_c]`
/// (`q_tes > 0` discharges the tank). Output: `[T0_r, q0, T1_s..Tn_s,
/// T1_c..Tn_c, q1_c..qn_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    params: PlantParams,
}

impl PlantModel {
    pub fn new(params: PlantParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn n_loads(&self) -> usize {
        self.params.n_loads
    }

    pub fn state_size(&self) -> usize {
        2 + self.params.n_loads
    }

    pub fn input_size(&self) -> usize {
        2 + self.params.n_loads
    }

    pub fn output_size(&self) -> usize {
        2 + 3 * self.params.n_loads
    }

    pub fn input_names(&self) -> Vec<String> {
        let mut v = vec!["T0_s".to_string(), "q_tes".to_string()];
        v.extend((1..=self.n_loads()).map(|j| format!("P{j}_c")));
        v
    }

    pub fn output_names(&self) -> Vec<String> {
        let n = self.n_loads();
        let mut v = vec!["T0_r".to_string(), "q0".to_string()];
        v.extend((1..=n).map(|j| format!("T{j}_s")));
        v.extend((1..=n).map(|j| format!("T{j}_c")));
        v.extend((1..=n).map(|j| format!("q{j}_c")));
        v
    }

    pub fn state_names(&self) -> Vec<String> {
        let mut v = vec!["T0_r".to_string()];
        v.extend((1..=self.n_loads()).map(|j| format!("T_pipe{j}")));
        v.push("E_tes".into());
        v
    }

    /// Output index of the return temperature.
    pub const RETURN_TEMPERATURE: usize = 0;
    pub const STATION_FLOW: usize = 1;

    /// Output index of substation `j`'s supply temperature.
    pub fn supply_temperature_index(&self, j: usize) -> usize {
        2 + j
    }

    /// A rest state: pipes at `supply`, return a few kelvin above the
    /// consumer reference, storage at its initial fill.
    pub fn initial_state(&self, supply: f64) -> DVector<f64> {
        let p = &self.params;
        let mut x = DVector::from_element(self.state_size(), supply);
        x[0] = p.consumer_reference + 5.0;
        x[self.state_size() - 1] = p.initial_storage_fraction * p.storage_capacity;
        x
    }

    pub fn effectiveness(&self, power: f64) -> f64 {
        let p = &self.params;
        let r = power / p.p_ref;
        (p.eta0 - p.eta1 * r * r).max(p.eta_min)
    }

    pub fn step(&self, state: &[f64], input: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let r = self.step_report(state, input)?;
        Ok((r.next_state, r.output))
    }

    pub fn step_report(&self, state: &[f64], input: &[f64]) -> Result<StepReport> {
        check_dim("plant state", self.state_size(), state.len())?;
        check_dim("plant input", self.input_size(), input.len())?;
        check_finite("plant state", state)?;
        check_finite("plant input", input)?;
        let p = &self.params;
        let n = p.n_loads;
        let tau = p.sample_time;
        let t0r = state[0];
        let energy = state[n + 1];
        let t0s = input[0];
        let q_request = input[1];

        let mut output = DVector::zeros(self.output_size());
        let mut mix_heat = 0.0;
        let mut total_flow = 0.0;
        let mut saturated = false;
        for j in 0..n {
            let t_pipe = state[1 + j];
            let power = input[2 + j].max(0.0);
            let eta = self.effectiveness(power);
            let qb = p.bypass_flow[j];
            // Tjs = T_pipe - UA(T_pipe - Tg)/(cp (qj + qb)) with qj = P/(cp η (Tjs - Tref))
            // is a quadratic in D = Tjs - Tref.
            let a = t_pipe - p.consumer_reference;
            let k = power / (p.cp * eta);
            let loss = p.loss_conductance[j] * (t_pipe - p.ground_temperature) / p.cp;
            let mut d = solve_substation(a, k, loss, qb);
            if !(d >= p.min_temperature_difference) {
                debug!("substation {} below temperature-difference floor (D = {d})", j + 1);
                d = p.min_temperature_difference;
                saturated = true;
            }
            let tjs = p.consumer_reference + d;
            let qj = k / d;
            let tjc = tjs - eta * d;
            output[2 + j] = tjs;
            output[2 + n + j] = tjc;
            output[2 + 2 * n + j] = qj;
            mix_heat += qj * tjc + qb * tjs;
            total_flow += qj + qb;
        }
        let t_mix = mix_heat / total_flow;

        // storage flow limited by the station minimum flow and the tank fill
        let mut q_tes = q_request.min(total_flow - p.min_station_flow);
        let rate = tau * p.cp * (t0r - t0s);
        let e_next = energy + q_tes * rate;
        if rate != 0.0 {
            if e_next < 0.0 {
                q_tes = -energy / rate;
            } else if e_next > p.storage_capacity {
                q_tes = (p.storage_capacity - energy) / rate;
            }
        }
        output[0] = t0r;
        output[1] = total_flow - q_tes;

        let mut next = DVector::zeros(self.state_size());
        next[0] = t0r + (tau / p.return_lag) * (t_mix - t0r);
        for j in 0..n {
            let t_pipe = state[1 + j];
            next[1 + j] = t_pipe + (tau / p.pipe_lag[j]) * (t0s - t_pipe);
        }
        next[n + 1] = energy + tau * p.cp * q_tes * (t0r - t0s);
        Ok(StepReport {
            next_state: next,
            output,
            storage_flow: q_tes,
            saturated,
        })
    }

    /// Runs the plant over an input sequence from `x0`; returns outputs.
    pub fn simulate(&self, x0: &[f64], inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut x = DVector::from_column_slice(x0);
        let mut ys = Vec::with_capacity(inputs.len());
        for u in inputs {
            let (xn, y) = self.step(x.as_slice(), u.as_slice())?;
            ys.push(y);
            x = xn;
        }
        Ok(ys)
    }
}

/// Positive root of `qb D² + (K − A qb + L) D − A K = 0`, or a non-positive
/// value when the pipe cannot sustain any temperature lift.
fn solve_substation(a: f64, k: f64, loss: f64, qb: f64) -> f64 {
    let b = k - a * qb + loss;
    let disc = (b * b + 4.0 * qb * a * k).max(0.0).sqrt();
    if b < 0.0 {
        (-b + disc) / (2.0 * qb)
    } else if b + disc > 0.0 {
        2.0 * a * k / (b + disc)
    } else {
        0.0
    }
}
