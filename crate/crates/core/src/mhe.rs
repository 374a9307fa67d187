//! Moving-horizon state estimation for a single expert.
//!
//! The window holds the last `Ĥ` applied inputs and measured plant outputs
//! `(u(j), y_p(j))`, `j = k−Ĥ … k−1`. The decision variables are the state
//! at the window start and the additive process noise `ω(j)`; the states are
//! reconstructed by the perturbed rollout `x(j+1) = f(x(j), u(j)) + ω(j)`.
//! The cost is
//!
//! `q_x ‖x(k−Ĥ) − x̄‖² + Σⱼ (q_ν ‖ν(j)‖² + q_ω ‖ω(j)‖²) + ρ Σ dist(x(j), 𝒳)²`
//!
//! with `ν(j)` the residual between measurement and expert output in the
//! expert's scaled units. The window-start state is projected onto
//! `𝒳 = [−1, 1]^{n_x}`; intermediate states leaving `𝒳` are penalized.
//! The estimate `x̂(k)` is the state after the last window step.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::optim::{minimize_box, Objective, SolverSettings};
use crate::recmodel::GruModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MheConfig {
    pub horizon: usize,
    /// `Q_x = q_x I`.
    pub state_weight: f64,
    /// `Q_ν = q_ν I`; zero leaves only the arrival cost.
    pub measurement_weight: f64,
    /// `Q_ω = q_ω I`.
    pub process_weight: f64,
    /// Weight on squared excursions of intermediate states outside `[−1, 1]`.
    pub state_penalty: f64,
    pub solver: SolverSettings,
}

impl Default for MheConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            state_weight: 1.0,
            measurement_weight: 1.0,
            process_weight: 1.0,
            state_penalty: 1e4,
            solver: SolverSettings {
                max_iterations: 100,
                tolerance: 1e-5,
                ..SolverSettings::default()
            },
        }
    }
}

impl MheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("MHE horizon must be at least 1".into()));
        }
        if !(self.state_weight > 0.0) || !(self.process_weight > 0.0) {
            return Err(Error::Config("MHE state and process weights must be positive".into()));
        }
        if !(self.measurement_weight >= 0.0) || !(self.state_penalty >= 0.0) {
            return Err(Error::Config("MHE measurement weight and penalty must be non-negative".into()));
        }
        self.solver.validate()
    }
}

/// Arrival-cost prior and warm start of one expert's estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPrior {
    /// `x̄`: prior for the state at the window start.
    pub prior: DVector<f64>,
    start_guess: DVector<f64>,
    omega_guess: Vec<f64>,
}

impl ExpertPrior {
    pub fn zero(nx: usize) -> Self {
        Self {
            prior: DVector::zeros(nx),
            start_guess: DVector::zeros(nx),
            omega_guess: Vec::new(),
        }
    }
}

/// Shared measurement window plus one prior per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct MheState {
    horizon: usize,
    inputs: VecDeque<Vec<f64>>,
    outputs: VecDeque<Vec<f64>>,
    priors: Vec<ExpertPrior>,
}

impl MheState {
    /// Empty window with zero priors for experts of the given hidden sizes.
    pub fn new(horizon: usize, hidden_sizes: &[usize]) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("MHE horizon must be at least 1".into()));
        }
        Ok(Self {
            horizon,
            inputs: VecDeque::with_capacity(horizon),
            outputs: VecDeque::with_capacity(horizon),
            priors: hidden_sizes.iter().map(|&n| ExpertPrior::zero(n)).collect(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.inputs.len() == self.horizon
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.iter().map(Vec::as_slice)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &[f64]> {
        self.outputs.iter().map(Vec::as_slice)
    }

    pub fn prior(&self, expert: usize) -> &ExpertPrior {
        &self.priors[expert]
    }

    /// FIFO append of an applied input and the plant output it produced.
    pub fn push_measurement(&mut self, input: &[f64], output: &[f64]) -> Result<()> {
        if let (Some(u), Some(y)) = (self.inputs.front(), self.outputs.front()) {
            check_dim("MHE input", u.len(), input.len())?;
            check_dim("MHE output", y.len(), output.len())?;
        }
        check_finite("MHE input", input)?;
        check_finite("MHE measurement", output)?;
        if self.is_full() {
            self.inputs.pop_front();
            self.outputs.pop_front();
        }
        self.inputs.push_back(input.to_vec());
        self.outputs.push_back(output.to_vec());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheSolution {
    /// `x̂(k)`, inside `[−1, 1]^{n_x}`.
    pub estimate: DVector<f64>,
    /// Optimized state at the window start.
    pub window_start: DVector<f64>,
    pub objective: f64,
    pub residual_norm: f64,
    pub noise_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub solve_time: f64,
}

/// Objective over `[x(k−m), ω(0) … ω(m−1)]` for a window of length `m`.
pub struct MheObjective<'a> {
    model: &'a GruModel,
    config: &'a MheConfig,
    prior: &'a [f64],
    /// Window inputs, physical, flat.
    inputs: Vec<f64>,
    /// Window measurements, scaled, flat.
    measured: Vec<f64>,
    steps: usize,
}

impl<'a> MheObjective<'a> {
    pub fn new(model: &'a GruModel, state: &MheState, prior: &'a [f64], config: &'a MheConfig) -> Result<Self> {
        check_dim("MHE prior", model.hidden_size(), prior.len())?;
        let mut inputs = Vec::with_capacity(state.len() * model.input_size());
        for u in state.inputs() {
            check_dim("MHE input", model.input_size(), u.len())?;
            inputs.extend_from_slice(u);
        }
        let mut measured = Vec::with_capacity(state.len() * model.output_size());
        for y in state.outputs() {
            check_dim("MHE measurement", model.output_size(), y.len())?;
            measured.extend(model.scale_output(y)?);
        }
        Ok(Self {
            model,
            config,
            prior,
            inputs,
            measured,
            steps: state.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.model.hidden_size() * (self.steps + 1)
    }

    /// Box: window start in `[−1, 1]`, noise unbounded.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let nx = self.model.hidden_size();
        let mut lo = vec![f64::NEG_INFINITY; self.dim()];
        let mut hi = vec![f64::INFINITY; self.dim()];
        lo[..nx].iter_mut().for_each(|v| *v = -1.0);
        hi[..nx].iter_mut().for_each(|v| *v = 1.0);
        (lo, hi)
    }

    fn evaluate(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let nx = self.model.hidden_size();
        let ny = self.model.output_size();
        let c = self.config;
        let (x0, omega) = z.split_at(nx);
        let tape = self.model.forward_flat(x0, &self.inputs, Some(omega));

        let mut total = 0.0;
        for i in 0..nx {
            let d = x0[i] - self.prior[i];
            total += c.state_weight * d * d;
        }
        let mut out_adj = vec![0.0; self.steps * ny];
        let gain = self.model.output_scaler().gain();
        for j in 0..self.steps {
            let y = tape.scaled_output(j);
            for o in 0..ny {
                let nu = self.measured[j * ny + o] - y[o];
                total += c.measurement_weight * nu * nu;
                // adjoint of the physical output
                out_adj[j * ny + o] = -2.0 * c.measurement_weight * nu / gain[o];
            }
        }
        for w in omega {
            total += c.process_weight * w * w;
        }
        let mut state_adj = vec![0.0; (self.steps + 1) * nx];
        for j in 1..=self.steps {
            for (i, x) in tape.state(j).iter().enumerate() {
                let excess = x.abs() - 1.0;
                if excess > 0.0 {
                    total += c.state_penalty * excess * excess;
                    state_adj[j * nx + i] = 2.0 * c.state_penalty * excess * x.signum();
                }
            }
        }

        if let Some(grad) = grad {
            let g = self.model.backward_flat(&tape, &out_adj, Some(&state_adj), None);
            for i in 0..nx {
                grad[i] = g.states[i] + 2.0 * c.state_weight * (x0[i] - self.prior[i]);
            }
            for (k, w) in omega.iter().enumerate() {
                grad[nx + k] = g.states[nx + k] + 2.0 * c.process_weight * w;
            }
        }
        total
    }

    /// States `x(k−m) … x(k)` and scaled residual / noise norms at `z`.
    fn reconstruct(&self, z: &[f64]) -> (Vec<DVector<f64>>, f64, f64) {
        let nx = self.model.hidden_size();
        let ny = self.model.output_size();
        let (x0, omega) = z.split_at(nx);
        let tape = self.model.forward_flat(x0, &self.inputs, Some(omega));
        let states = (0..=self.steps).map(|j| DVector::from_column_slice(tape.state(j))).collect();
        let mut res = 0.0;
        for j in 0..self.steps {
            for (o, y) in tape.scaled_output(j).iter().enumerate() {
                res += (self.measured[j * ny + o] - y).powi(2);
            }
        }
        let noise = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
        (states, res.sqrt(), noise)
    }
}

impl Objective for MheObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None)
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(x, Some(grad))
    }
}

/// Estimates `x̂(k)` for expert `index` from the current window and updates
/// its prior and warm start for the next step. A window shorter than `Ĥ`
/// is the cold-start path: the prior stays at zero because the window still
/// begins at the first sample; an empty window yields the zero state.
pub fn solve_mhe(model: &GruModel, state: &mut MheState, index: usize, config: &MheConfig) -> Result<MheSolution> {
    config.validate()?;
    if config.horizon != state.horizon {
        return Err(Error::Config(format!(
            "MHE state horizon {} differs from config horizon {}",
            state.horizon, config.horizon
        )));
    }
    let nx = model.hidden_size();
    let entry = state
        .priors
        .get(index)
        .ok_or_else(|| Error::InvalidInput(format!("no MHE prior for expert {index}")))?;
    check_dim("MHE prior", nx, entry.prior.len())?;
    if entry.prior.iter().any(|v| v.abs() > 1.0) {
        return Err(Error::InvalidInput("MHE prior outside [-1, 1]".into()));
    }
    let start = Instant::now();
    if state.is_empty() {
        return Ok(MheSolution {
            estimate: DVector::zeros(nx),
            window_start: DVector::zeros(nx),
            objective: 0.0,
            residual_norm: 0.0,
            noise_norm: 0.0,
            iterations: 0,
            converged: true,
            solve_time: start.elapsed().as_secs_f64(),
        });
    }
    let steps = state.len();
    let prior = entry.prior.as_slice().to_vec();
    let objective = MheObjective::new(model, state, &prior, config)?;

    let mut z0 = Vec::with_capacity(objective.dim());
    z0.extend_from_slice(entry.start_guess.as_slice());
    z0.extend(entry.omega_guess.iter().copied().take(steps * nx));
    z0.resize(objective.dim(), 0.0);
    let (lo, hi) = objective.bounds();
    let result = minimize_box(&objective, &z0, &lo, &hi, &config.solver)?;
    let (states, residual_norm, noise_norm) = objective.reconstruct(&result.x);
    let estimate = states[steps].map(|v| v.clamp(-1.0, 1.0));

    let omega = &result.x[nx..];
    let next = &mut state.priors[index];
    if steps == state.horizon {
        // the next push drops the oldest sample, so the window advances
        next.prior = states[1].map(|v| v.clamp(-1.0, 1.0));
        next.start_guess = next.prior.clone();
        next.omega_guess = omega[nx..].to_vec();
    } else {
        next.start_guess = states[0].clone();
        next.omega_guess = omega.to_vec();
    }
    next.omega_guess.extend(std::iter::repeat_n(0.0, nx));

    Ok(MheSolution {
        estimate,
        window_start: states[0].clone(),
        objective: result.value,
        residual_norm,
        noise_norm,
        iterations: result.iterations,
        converged: result.converged,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

/// Estimate from a partial window with zero prior (fresh estimator).
pub fn cold_start(model: &GruModel, state: &MheState, config: &MheConfig) -> Result<DVector<f64>> {
    if state.is_full() {
        return Err(Error::InvalidInput("cold start needs a partial window".into()));
    }
    let mut fresh = MheState {
        horizon: state.horizon,
        inputs: state.inputs.clone(),
        outputs: state.outputs.clone(),
        priors: vec![ExpertPrior::zero(model.hidden_size())],
    };
    Ok(solve_mhe(model, &mut fresh, 0, config)?.estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recmodel::AffineScaler;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(hidden: usize, seed: u64) -> GruModel {
        let s_in = AffineScaler::new(vec![75.0, 0.0], vec![10.0, 15.0]).unwrap();
        let s_out = AffineScaler::new(vec![55.0, 6.0], vec![5.0, 4.0]).unwrap();
        GruModel::init(hidden, s_in, s_out, seed).unwrap()
    }

    fn random_inputs(n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| DVector::from_vec(vec![rng.random_range(65.0..85.0), rng.random_range(-15.0..15.0)]))
            .collect()
    }

    fn tight(horizon: usize) -> MheConfig {
        MheConfig {
            horizon,
            solver: SolverSettings {
                max_iterations: 5000,
                tolerance: 1e-10,
                ..SolverSettings::default()
            },
            ..MheConfig::default()
        }
    }

    #[test]
    fn push_is_fifo() {
        let mut s = MheState::new(3, &[2]).unwrap();
        s.push_measurement(&[1.0], &[10.0]).unwrap();
        assert_eq!(s.len(), 1);
        s.push_measurement(&[2.0], &[20.0]).unwrap();
        s.push_measurement(&[3.0], &[30.0]).unwrap();
        let got: Vec<f64> = s.inputs().map(|u| u[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
        s.push_measurement(&[4.0], &[40.0]).unwrap();
        assert_eq!(s.len(), 3);
        let got: Vec<f64> = s.outputs().map(|y| y[0]).collect();
        assert_eq!(got, vec![20.0, 30.0, 40.0]);
        assert!(s.push_measurement(&[1.0, 2.0], &[1.0]).is_err());
        assert!(s.push_measurement(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn empty_window_gives_zero_state() {
        let m = model(3, 1);
        let s = MheState::new(4, &[3]).unwrap();
        assert_eq!(cold_start(&m, &s, &tight(4)).unwrap(), DVector::zeros(3));
    }

    /// Simulates the expert itself from a random state; the estimator,
    /// started on the true trajectory, must recover the current state.
    #[test]
    fn recovers_state_of_the_expert_itself() {
        for seed in 0..3 {
            let m = model(4, seed);
            let h = 6;
            let inputs = random_inputs(40, seed);
            let traj = m.rollout(&[0.0; 4], &inputs).unwrap();
            let cfg = tight(h);
            let mut s = MheState::new(h, &[4]).unwrap();
            for k in 0..inputs.len() {
                let sol = solve_mhe(&m, &mut s, 0, &cfg).unwrap();
                assert!((&sol.estimate - &traj.states[k]).amax() < 1e-4, "seed {seed} k {k}");
                if s.is_full() {
                    assert!(sol.residual_norm < 1e-5 && sol.noise_norm < 1e-5);
                }
                s.push_measurement(inputs[k].as_slice(), traj.outputs[k].as_slice()).unwrap();
            }
        }
    }

    #[test]
    fn one_step_window_matches_weighted_least_squares() {
        for seed in 0..5 {
            let m = model(3, 20 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_inputs(1, seed)[0].clone();
            let x_true = DVector::from_fn(3, |_, _| rng.random_range(-0.4..0.4));
            let (_, y) = m.step(x_true.as_slice(), u.as_slice()).unwrap();
            let y = y.map(|v| v + rng.random_range(-0.3..0.3));
            let cfg = MheConfig {
                measurement_weight: 2.0,
                state_weight: 0.5,
                ..tight(1)
            };
            let mut s = MheState::new(1, &[3]).unwrap();
            s.push_measurement(u.as_slice(), y.as_slice()).unwrap();
            let sol = solve_mhe(&m, &mut s, 0, &cfg).unwrap();

            // (q_x I + q_ν CᵀC) x = q_ν Cᵀ (y_s − D u_s − b) with zero prior
            let p = m.params();
            let us = DVector::from_vec(m.scale_input(u.as_slice()).unwrap());
            let ys = DVector::from_vec(m.scale_output(y.as_slice()).unwrap());
            let c = &p.c_out;
            let lhs = DMatrix::identity(3, 3) * cfg.state_weight + c.transpose() * c * cfg.measurement_weight;
            let rhs = c.transpose() * (ys - &p.d_out * us - &p.b_out) * cfg.measurement_weight;
            let x = lhs.lu().solve(&rhs).unwrap();
            assert!(x.amax() < 1.0);
            assert!((&sol.window_start - &x).amax() < 1e-6, "{} vs {x}", sol.window_start);
            let (next, _) = m.step(x.as_slice(), u.as_slice()).unwrap();
            assert!((sol.estimate - next).amax() < 1e-6);
        }
    }

    #[test]
    fn without_measurements_the_prior_wins() {
        let m = model(3, 4);
        let inputs = random_inputs(5, 4);
        let traj = m.rollout(&[0.3, -0.2, 0.1], &inputs).unwrap();
        let cfg = MheConfig {
            measurement_weight: 0.0,
            ..tight(5)
        };
        let mut s = MheState::new(5, &[3]).unwrap();
        for k in 0..5 {
            s.push_measurement(inputs[k].as_slice(), traj.outputs[k].as_slice()).unwrap();
        }
        s.priors[0].prior = DVector::from_vec(vec![0.2, 0.1, -0.5]);
        let sol = solve_mhe(&m, &mut s, 0, &cfg).unwrap();
        assert!((sol.window_start - DVector::from_vec(vec![0.2, 0.1, -0.5])).amax() < 1e-8);
        assert!(sol.noise_norm < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let m = model(3, 40 + seed);
            let h = 5;
            let inputs = random_inputs(h, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = MheState::new(h, &[3]).unwrap();
            for u in &inputs {
                let y = [rng.random_range(45.0..65.0), rng.random_range(0.0..12.0)];
                s.push_measurement(u.as_slice(), &y).unwrap();
            }
            let prior = [0.1, -0.2, 0.3];
            let cfg = MheConfig {
                state_penalty: 10.0,
                ..tight(h)
            };
            let obj = MheObjective::new(&m, &s, &prior, &cfg).unwrap();
            // large noise entries push states outside the box so the penalty is exercised
            let z: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = vec![0.0; z.len()];
            obj.value_and_gradient(&z, &mut g);
            let step = 1e-6;
            for i in 0..z.len() {
                let mut a = z.clone();
                a[i] += step;
                let mut b = z.clone();
                b[i] -= step;
                let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * step);
                assert!(
                    (g[i] - fd).abs() <= 1e-5 * g[i].abs().max(fd.abs()).max(1e-2),
                    "seed {seed} coord {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn optimum_never_worse_than_prior_candidate() {
        let m = model(3, 7);
        let inputs = random_inputs(6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = MheState::new(6, &[3]).unwrap();
        for u in &inputs {
            s.push_measurement(u.as_slice(), &[rng.random_range(45.0..65.0), rng.random_range(0.0..12.0)])
                .unwrap();
        }
        let cfg = MheConfig::default().clone();
        let cfg = MheConfig { horizon: 6, ..cfg };
        let prior = [0.0; 3];
        let candidate = MheObjective::new(&m, &s, &prior, &cfg).unwrap().value(&[0.0; 21]);
        let sol = solve_mhe(&m, &mut s, 0, &cfg).unwrap();
        assert!(sol.objective <= candidate);
        assert!(sol.estimate.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn cold_start_approaches_full_window_estimate() {
        let m = model(4, 9);
        let h = 8;
        let inputs = random_inputs(2 * h, 9);
        let traj = m.rollout(&[0.0; 4], &inputs).unwrap();
        let cfg = tight(h);
        let mut s = MheState::new(h, &[4]).unwrap();
        for k in 0..h {
            s.push_measurement(inputs[k].as_slice(), traj.outputs[k].as_slice()).unwrap();
            if !s.is_full() {
                let cold = cold_start(&m, &s, &cfg).unwrap();
                assert!((cold - &traj.states[k + 1]).amax() < 1e-3);
            }
        }
        let full = solve_mhe(&m, &mut s, 0, &cfg).unwrap();
        assert_relative_eq!((full.estimate - &traj.states[h]).amax(), 0.0, epsilon = 1e-4);
    }

    #[test]
    fn experts_are_estimated_independently() {
        let models = [model(3, 1), model(4, 2)];
        let inputs = random_inputs(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<[f64; 2]> = (0..8).map(|_| [rng.random_range(45.0..65.0), rng.random_range(0.0..12.0)]).collect();
        let cfg = MheConfig {
            horizon: 4,
            ..MheConfig::default()
        };
        let run = |order: [usize; 2]| {
            let sizes: Vec<usize> = order.iter().map(|&i| models[i].hidden_size()).collect();
            let mut s = MheState::new(4, &sizes).unwrap();
            let mut out = vec![Vec::new(); 2];
            for k in 0..8 {
                for (slot, &i) in order.iter().enumerate() {
                    out[i].push(solve_mhe(&models[i], &mut s, slot, &cfg).unwrap().estimate);
                }
                s.push_measurement(inputs[k].as_slice(), &ys[k]).unwrap();
            }
            out
        };
        assert_eq!(run([0, 1]), run([1, 0]));
    }
}
