use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::GruParams;
use super::scaler::AffineScaler;
use crate::error::{check_dim, check_finite, Error, Result};

/// One recurrent expert: GRU state update `f` and affine readout `g`, both
/// operating on scaled signals, wrapped by input/output scalers so callers
/// work in physical units.
///
/// ```text
/// z  = σ(W_z u + U_z x + b_z)
/// r  = σ(W_r u + U_r x + b_r)
/// c  = tanh(W_c u + U_c (r ∘ x) + b_c)
/// x⁺ = x + z ∘ (c − x)
/// y  = C x + D u + b_y
/// ```
///
/// Since `x⁺` is a gate-weighted convex combination of `x` and `c ∈ (−1, 1)`,
/// states that start in `[−1, 1]` stay there.
#[derive(Debug, Clone, PartialEq)]
pub struct GruModel {
    params: GruParams,
    input_scaler: AffineScaler,
    output_scaler: AffineScaler,
    input_names: Vec<String>,
    output_names: Vec<String>,
}

impl GruModel {
    pub fn new(
        params: GruParams,
        input_scaler: AffineScaler,
        output_scaler: AffineScaler,
    ) -> Result<Self> {
        let input_names = (0..params.input_size()).map(|i| format!("u{i}")).collect();
        let output_names = (0..params.output_size()).map(|i| format!("y{i}")).collect();
        Self::with_names(params, input_scaler, output_scaler, input_names, output_names)
    }

    pub fn with_names(
        params: GruParams,
        input_scaler: AffineScaler,
        output_scaler: AffineScaler,
        input_names: Vec<String>,
        output_names: Vec<String>,
    ) -> Result<Self> {
        validate_shapes(&params)?;
        check_dim("input scaler", params.input_size(), input_scaler.dim())?;
        check_dim("output scaler", params.output_size(), output_scaler.dim())?;
        check_dim("input names", params.input_size(), input_names.len())?;
        check_dim("output names", params.output_size(), output_names.len())?;
        Ok(Self {
            params,
            input_scaler,
            output_scaler,
            input_names,
            output_names,
        })
    }

    /// Seeded random initialization with the given scalers.
    pub fn init(
        hidden: usize,
        input_scaler: AffineScaler,
        output_scaler: AffineScaler,
        seed: u64,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidInput("hidden size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GruParams::random(hidden, input_scaler.dim(), output_scaler.dim(), &mut rng);
        Self::new(params, input_scaler, output_scaler)
    }

    pub fn hidden_size(&self) -> usize {
        self.params.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.params.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.params.output_size()
    }

    pub fn params(&self) -> &GruParams {
        &self.params
    }

    pub fn input_scaler(&self) -> &AffineScaler {
        &self.input_scaler
    }

    pub fn output_scaler(&self) -> &AffineScaler {
        &self.output_scaler
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn set_channel_names(&mut self, inputs: Vec<String>, outputs: Vec<String>) -> Result<()> {
        check_dim("input names", self.input_size(), inputs.len())?;
        check_dim("output names", self.output_size(), outputs.len())?;
        self.input_names = inputs;
        self.output_names = outputs;
        Ok(())
    }

    /// Replaces the weights, keeping scalers and names.
    pub fn with_params(&self, params: GruParams) -> Result<Self> {
        Self::with_names(
            params,
            self.input_scaler.clone(),
            self.output_scaler.clone(),
            self.input_names.clone(),
            self.output_names.clone(),
        )
    }

    pub fn scale_input(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.input_scaler.scale(input)
    }

    pub fn unscale_output(&self, scaled: &[f64]) -> Result<Vec<f64>> {
        self.output_scaler.unscale(scaled)
    }

    pub fn scale_output(&self, output: &[f64]) -> Result<Vec<f64>> {
        self.output_scaler.scale(output)
    }

    /// One step of the expert: returns `(x(k+1), y(k))` with `y` in physical units.
    pub fn step(&self, state: &[f64], input: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("step state", self.hidden_size(), state.len())?;
        check_dim("step input", self.input_size(), input.len())?;
        check_finite("step input", input)?;
        check_finite("step state", state)?;
        let tape = self.forward_flat(state, input, None);
        Ok((
            DVector::from_column_slice(tape.state(1)),
            DVector::from_vec(tape.output(0, &self.output_scaler)),
        ))
    }

    /// Iterates the expert over `inputs` from `x0`. The returned trajectory
    /// holds `T + 1` states (including `x0`), `T` outputs and the tape
    /// needed by [`rollout_vjp`](Self::rollout_vjp).
    pub fn rollout(&self, x0: &[f64], inputs: &[DVector<f64>]) -> Result<Trajectory> {
        self.rollout_impl(x0, inputs, None)
    }

    /// Rollout with additive state perturbations:
    /// `x(k+1) = f(x(k), u(k)) + ω(k)`.
    pub fn rollout_perturbed(
        &self,
        x0: &[f64],
        inputs: &[DVector<f64>],
        perturbations: &[DVector<f64>],
    ) -> Result<Trajectory> {
        check_dim("perturbation count", inputs.len(), perturbations.len())?;
        let nx = self.hidden_size();
        let mut flat = Vec::with_capacity(nx * perturbations.len());
        for w in perturbations {
            check_dim("perturbation", nx, w.len())?;
            flat.extend_from_slice(w.as_slice());
        }
        check_finite("perturbation", &flat)?;
        self.rollout_impl(x0, inputs, Some(&flat))
    }

    fn rollout_impl(
        &self,
        x0: &[f64],
        inputs: &[DVector<f64>],
        perturbations: Option<&[f64]>,
    ) -> Result<Trajectory> {
        check_dim("rollout x0", self.hidden_size(), x0.len())?;
        if inputs.is_empty() {
            return Err(Error::InvalidInput("rollout needs at least one input".into()));
        }
        check_finite("rollout x0", x0)?;
        let nu = self.input_size();
        let mut flat = Vec::with_capacity(nu * inputs.len());
        for u in inputs {
            check_dim("rollout input", nu, u.len())?;
            flat.extend_from_slice(u.as_slice());
        }
        check_finite("rollout input", &flat)?;
        let tape = self.forward_flat(x0, &flat, perturbations);
        let states = (0..=tape.len())
            .map(|k| DVector::from_column_slice(tape.state(k)))
            .collect();
        let outputs = (0..tape.len())
            .map(|k| DVector::from_vec(tape.output(k, &self.output_scaler)))
            .collect();
        Ok(Trajectory {
            states,
            outputs,
            tape,
        })
    }

    /// Vector–Jacobian product of a rollout. `output_adjoints` are
    /// sensitivities with respect to the physical outputs, one per step.
    pub fn rollout_vjp(
        &self,
        tape: &RolloutTape,
        output_adjoints: &[DVector<f64>],
        terminal_state_adjoint: &[f64],
    ) -> Result<RolloutGradients> {
        let nx = self.hidden_size();
        check_dim("terminal state adjoint", nx, terminal_state_adjoint.len())?;
        let mut state_adj = vec![0.0; (tape.len() + 1) * nx];
        state_adj[tape.len() * nx..].copy_from_slice(terminal_state_adjoint);
        self.vjp_impl(tape, output_adjoints, &state_adj)
    }

    /// VJP with adjoints injected on every state `x(0)…x(T)`.
    pub fn rollout_vjp_states(
        &self,
        tape: &RolloutTape,
        output_adjoints: &[DVector<f64>],
        state_adjoints: &[DVector<f64>],
    ) -> Result<RolloutGradients> {
        check_dim("state adjoint count", tape.len() + 1, state_adjoints.len())?;
        let nx = self.hidden_size();
        let mut flat = Vec::with_capacity(nx * state_adjoints.len());
        for a in state_adjoints {
            check_dim("state adjoint", nx, a.len())?;
            flat.extend_from_slice(a.as_slice());
        }
        self.vjp_impl(tape, output_adjoints, &flat)
    }

    fn vjp_impl(
        &self,
        tape: &RolloutTape,
        output_adjoints: &[DVector<f64>],
        state_adj: &[f64],
    ) -> Result<RolloutGradients> {
        self.check_tape(tape)?;
        check_dim("output adjoint count", tape.len(), output_adjoints.len())?;
        let ny = self.output_size();
        let mut out_adj = Vec::with_capacity(ny * tape.len());
        for a in output_adjoints {
            check_dim("output adjoint", ny, a.len())?;
            out_adj.extend_from_slice(a.as_slice());
        }
        let mut grads = GruParams::zeros(self.hidden_size(), self.input_size(), ny);
        let raw = self.backward_flat(tape, &out_adj, Some(state_adj), Some(&mut grads));
        let (nx, nu) = (self.hidden_size(), self.input_size());
        Ok(RolloutGradients {
            inputs: raw.inputs.chunks(nu).map(DVector::from_column_slice).collect(),
            x0: DVector::from_column_slice(&raw.states[..nx]),
            states: raw.states.chunks(nx).map(DVector::from_column_slice).collect(),
            params: grads,
        })
    }

    fn check_tape(&self, tape: &RolloutTape) -> Result<()> {
        check_dim("tape hidden size", self.hidden_size(), tape.nx)?;
        check_dim("tape input size", self.input_size(), tape.nu)?;
        check_dim("tape output size", self.output_size(), tape.ny)?;
        Ok(())
    }

    /// Forward pass on flat buffers (inputs in physical units, `T·n_u`).
    pub(crate) fn forward_flat(
        &self,
        x0: &[f64],
        inputs: &[f64],
        perturbations: Option<&[f64]>,
    ) -> RolloutTape {
        let p = &self.params;
        let (nx, nu, ny) = (self.hidden_size(), self.input_size(), self.output_size());
        let steps = inputs.len() / nu;
        let mut tape = RolloutTape {
            nx,
            nu,
            ny,
            steps,
            xs: Vec::with_capacity((steps + 1) * nx),
            us: vec![0.0; steps * nu],
            zs: vec![0.0; steps * nx],
            rs: vec![0.0; steps * nx],
            cs: vec![0.0; steps * nx],
            ys: vec![0.0; steps * ny],
        };
        tape.xs.extend_from_slice(x0);
        let mut rx = vec![0.0; nx];
        let mut x = x0.to_vec();
        for k in 0..steps {
            let us = &mut tape.us[k * nu..(k + 1) * nu];
            self.input_scaler.scale_into(&inputs[k * nu..(k + 1) * nu], us);

            let z = &mut tape.zs[k * nx..(k + 1) * nx];
            z.copy_from_slice(p.b_update.as_slice());
            matvec_add(&p.w_update, us, z);
            matvec_add(&p.u_update, &x, z);
            z.iter_mut().for_each(|v| *v = sigmoid(*v));

            let r = &mut tape.rs[k * nx..(k + 1) * nx];
            r.copy_from_slice(p.b_reset.as_slice());
            matvec_add(&p.w_reset, us, r);
            matvec_add(&p.u_reset, &x, r);
            r.iter_mut().for_each(|v| *v = sigmoid(*v));

            for i in 0..nx {
                rx[i] = r[i] * x[i];
            }
            let c = &mut tape.cs[k * nx..(k + 1) * nx];
            c.copy_from_slice(p.b_cand.as_slice());
            matvec_add(&p.w_cand, us, c);
            matvec_add(&p.u_cand, &rx, c);
            c.iter_mut().for_each(|v| *v = v.tanh());

            let y = &mut tape.ys[k * ny..(k + 1) * ny];
            y.copy_from_slice(p.b_out.as_slice());
            matvec_add(&p.c_out, &x, y);
            matvec_add(&p.d_out, us, y);

            for i in 0..nx {
                let mut next = x[i] + z[i] * (c[i] - x[i]);
                if let Some(w) = perturbations {
                    next += w[k * nx + i];
                }
                x[i] = next;
            }
            tape.xs.extend_from_slice(&x);
        }
        tape
    }

    /// Reverse pass. `out_adj` is `T·n_y` in physical output units;
    /// `state_adj`, when given, is `(T+1)·n_x` and is added to each state's
    /// adjoint. Returned state adjoints are totals for `x(0)…x(T)`.
    pub(crate) fn backward_flat(
        &self,
        tape: &RolloutTape,
        out_adj: &[f64],
        state_adj: Option<&[f64]>,
        mut grads: Option<&mut GruParams>,
    ) -> FlatGradients {
        let p = &self.params;
        let (nx, nu, ny) = (tape.nx, tape.nu, tape.ny);
        let steps = tape.steps;
        let gain_out = self.output_scaler.gain();
        let gain_in = self.input_scaler.gain();

        let mut states = vec![0.0; (steps + 1) * nx];
        let mut inputs = vec![0.0; steps * nu];
        let mut a_next: Vec<f64> = match state_adj {
            Some(s) => s[steps * nx..(steps + 1) * nx].to_vec(),
            None => vec![0.0; nx],
        };
        states[steps * nx..].copy_from_slice(&a_next);

        let mut a_ys = vec![0.0; ny];
        let mut a_x = vec![0.0; nx];
        let mut a_us = vec![0.0; nu];
        let mut a_pz = vec![0.0; nx];
        let mut a_pr = vec![0.0; nx];
        let mut a_pc = vec![0.0; nx];
        let mut a_rx = vec![0.0; nx];
        let mut rx = vec![0.0; nx];

        for k in (0..steps).rev() {
            let x = tape.state(k);
            let us = &tape.us[k * nu..(k + 1) * nu];
            let z = &tape.zs[k * nx..(k + 1) * nx];
            let r = &tape.rs[k * nx..(k + 1) * nx];
            let c = &tape.cs[k * nx..(k + 1) * nx];

            for j in 0..ny {
                a_ys[j] = out_adj[k * ny + j] * gain_out[j];
            }
            match state_adj {
                Some(s) => a_x.copy_from_slice(&s[k * nx..(k + 1) * nx]),
                None => a_x.iter_mut().for_each(|v| *v = 0.0),
            }
            a_us.iter_mut().for_each(|v| *v = 0.0);

            // x⁺ = x + z (c − x)
            for i in 0..nx {
                let a = a_next[i];
                a_x[i] += a * (1.0 - z[i]);
                a_pz[i] = a * (c[i] - x[i]) * z[i] * (1.0 - z[i]);
                a_pc[i] = a * z[i] * (1.0 - c[i] * c[i]);
                rx[i] = r[i] * x[i];
            }

            // candidate
            a_rx.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&p.u_cand, &a_pc, &mut a_rx);
            matvec_t_add(&p.w_cand, &a_pc, &mut a_us);
            for i in 0..nx {
                a_x[i] += a_rx[i] * r[i];
                let a_r = a_rx[i] * x[i];
                a_pr[i] = a_r * r[i] * (1.0 - r[i]);
            }

            // gates
            matvec_t_add(&p.u_update, &a_pz, &mut a_x);
            matvec_t_add(&p.w_update, &a_pz, &mut a_us);
            matvec_t_add(&p.u_reset, &a_pr, &mut a_x);
            matvec_t_add(&p.w_reset, &a_pr, &mut a_us);

            // readout
            matvec_t_add(&p.c_out, &a_ys, &mut a_x);
            matvec_t_add(&p.d_out, &a_ys, &mut a_us);

            if let Some(g) = grads.as_deref_mut() {
                outer_add(&mut g.w_cand, &a_pc, us);
                outer_add(&mut g.u_cand, &a_pc, &rx);
                add_into(g.b_cand.as_mut_slice(), &a_pc);
                outer_add(&mut g.w_update, &a_pz, us);
                outer_add(&mut g.u_update, &a_pz, x);
                add_into(g.b_update.as_mut_slice(), &a_pz);
                outer_add(&mut g.w_reset, &a_pr, us);
                outer_add(&mut g.u_reset, &a_pr, x);
                add_into(g.b_reset.as_mut_slice(), &a_pr);
                outer_add(&mut g.c_out, &a_ys, x);
                outer_add(&mut g.d_out, &a_ys, us);
                add_into(g.b_out.as_mut_slice(), &a_ys);
            }

            for j in 0..nu {
                inputs[k * nu + j] = a_us[j] / gain_in[j];
            }
            states[k * nx..(k + 1) * nx].copy_from_slice(&a_x);
            a_next.copy_from_slice(&a_x);
        }
        FlatGradients { inputs, states }
    }
}

fn validate_shapes(p: &GruParams) -> Result<()> {
    let (h, i, o) = (p.hidden_size(), p.input_size(), p.output_size());
    if h == 0 || i == 0 || o == 0 {
        return Err(Error::InvalidInput("model dimensions must be positive".into()));
    }
    let mats: [(&DMatrix<f64>, usize, usize); 8] = [
        (&p.w_update, h, i),
        (&p.u_update, h, h),
        (&p.w_reset, h, i),
        (&p.u_reset, h, h),
        (&p.w_cand, h, i),
        (&p.u_cand, h, h),
        (&p.c_out, o, h),
        (&p.d_out, o, i),
    ];
    for (m, r, c) in mats {
        if m.nrows() != r || m.ncols() != c {
            return Err(Error::InvalidInput(format!(
                "inconsistent GRU parameter shapes (hidden {h}, inputs {i}, outputs {o})"
            )));
        }
    }
    let vecs = [(&p.b_update, h), (&p.b_reset, h), (&p.b_cand, h), (&p.b_out, o)];
    if vecs.iter().any(|(v, n)| v.len() != *n) {
        return Err(Error::InvalidInput("inconsistent GRU bias lengths".into()));
    }
    Ok(())
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `y += M x` for column-major `M`.
#[inline]
fn matvec_add(m: &DMatrix<f64>, x: &[f64], y: &mut [f64]) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (j, xj) in x.iter().enumerate() {
        let col = &data[j * rows..(j + 1) * rows];
        for i in 0..rows {
            y[i] += col[i] * xj;
        }
    }
}

/// `y += Mᵀ a`.
#[inline]
fn matvec_t_add(m: &DMatrix<f64>, a: &[f64], y: &mut [f64]) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (j, yj) in y.iter_mut().enumerate() {
        let col = &data[j * rows..(j + 1) * rows];
        let mut acc = 0.0;
        for i in 0..rows {
            acc += col[i] * a[i];
        }
        *yj += acc;
    }
}

/// `G += a bᵀ`.
#[inline]
fn outer_add(g: &mut DMatrix<f64>, a: &[f64], b: &[f64]) {
    let rows = g.nrows();
    let data = g.as_mut_slice();
    for (j, bj) in b.iter().enumerate() {
        let col = &mut data[j * rows..(j + 1) * rows];
        for i in 0..rows {
            col[i] += a[i] * bj;
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Intermediate values of a rollout, consumed by the reverse pass.
#[derive(Debug, Clone)]
pub struct RolloutTape {
    nx: usize,
    nu: usize,
    ny: usize,
    steps: usize,
    xs: Vec<f64>,
    us: Vec<f64>,
    zs: Vec<f64>,
    rs: Vec<f64>,
    cs: Vec<f64>,
    ys: Vec<f64>,
}

impl RolloutTape {
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// State `x(k)` for `k ∈ 0..=T`.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.xs[k * self.nx..(k + 1) * self.nx]
    }

    /// Output `y(k)` in scaled units.
    pub fn scaled_output(&self, k: usize) -> &[f64] {
        &self.ys[k * self.ny..(k + 1) * self.ny]
    }

    pub(crate) fn output(&self, k: usize, scaler: &AffineScaler) -> Vec<f64> {
        let mut out = vec![0.0; self.ny];
        scaler.unscale_into(self.scaled_output(k), &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub tape: RolloutTape,
}

#[derive(Debug, Clone)]
pub struct RolloutGradients {
    /// Adjoints of the physical inputs, one per step.
    pub inputs: Vec<DVector<f64>>,
    pub x0: DVector<f64>,
    /// Total adjoints of `x(0)…x(T)`; entry `k+1` is also the adjoint of an
    /// additive perturbation `ω(k)`.
    pub states: Vec<DVector<f64>>,
    pub params: GruParams,
}

pub(crate) struct FlatGradients {
    pub inputs: Vec<f64>,
    pub states: Vec<f64>,
}
