//! Gated recurrent expert models with reverse-mode differentiation through
//! rollouts.

mod gru;
mod params;
mod scaler;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use gru::{GruModel, RolloutGradients, RolloutTape, Trajectory};
pub use params::{GruParams, PARAM_NAMES};
pub use scaler::AffineScaler;

use crate::error::{Error, Result};
use crate::io;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDocument {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub hidden_size: usize,
    pub input_size: usize,
    pub output_size: usize,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub input_scaler: AffineScaler,
    pub output_scaler: AffineScaler,
    pub weights: BTreeMap<String, MatrixDocument>,
}

impl GruModel {
    pub fn to_document(&self) -> ModelDocument {
        let p = self.params();
        let mut weights = BTreeMap::new();
        for ((name, (rows, cols)), slot) in PARAM_NAMES.iter().zip(p.shapes()).zip(p.slices()) {
            // stored column-major; emit row-major
            let m = DMatrix::from_column_slice(rows, cols, slot);
            weights.insert(
                name.to_string(),
                MatrixDocument {
                    rows,
                    cols,
                    data: crate::stats::row_major(&m),
                },
            );
        }
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            hidden_size: self.hidden_size(),
            input_size: self.input_size(),
            output_size: self.output_size(),
            input_names: self.input_names().to_vec(),
            output_names: self.output_names().to_vec(),
            input_scaler: self.input_scaler().clone(),
            output_scaler: self.output_scaler().clone(),
            weights,
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        let mut params = GruParams::zeros(doc.hidden_size, doc.input_size, doc.output_size);
        let shapes = params.shapes();
        for ((name, (rows, cols)), slot) in
            PARAM_NAMES.iter().zip(shapes).zip(params.slices_mut())
        {
            let m = doc
                .weights
                .get(*name)
                .ok_or_else(|| Error::InvalidInput(format!("model is missing weight `{name}`")))?;
            if m.rows != rows || m.cols != cols || m.data.len() != rows * cols {
                return Err(Error::InvalidInput(format!(
                    "weight `{name}` has shape {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
            let mat = DMatrix::from_row_slice(rows, cols, &m.data);
            slot.copy_from_slice(mat.as_slice());
        }
        // re-validate: deserialization bypasses the constructor checks
        let input_scaler = AffineScaler::new(
            doc.input_scaler.offset().to_vec(),
            doc.input_scaler.gain().to_vec(),
        )?;
        let output_scaler = AffineScaler::new(
            doc.output_scaler.offset().to_vec(),
            doc.output_scaler.gain().to_vec(),
        )?;
        GruModel::with_names(
            params,
            input_scaler,
            output_scaler,
            doc.input_names,
            doc.output_names,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, &self.to_document())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_document(io::read_json(path)?)
    }

    /// Propagates the model open-loop from `x0` and returns the physical outputs.
    pub fn simulate(&self, x0: &[f64], inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        Ok(self.rollout(x0, inputs)?.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(hidden: usize, nu: usize, ny: usize, seed: u64, spread: f64) -> GruModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GruParams::zeros(hidden, nu, ny);
        for slot in p.slices_mut() {
            for v in slot.iter_mut() {
                *v = rng.random_range(-spread..spread);
            }
        }
        let in_s = AffineScaler::new(
            (0..nu).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..nu).map(|_| rng.random_range(0.5..3.0)).collect(),
        )
        .unwrap();
        let out_s = AffineScaler::new(
            (0..ny).map(|_| rng.random_range(-5.0..5.0)).collect(),
            (0..ny).map(|_| rng.random_range(0.5..4.0)).collect(),
        )
        .unwrap();
        GruModel::new(p, in_s, out_s).unwrap()
    }

    fn random_inputs(nu: usize, steps: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..steps)
            .map(|_| DVector::from_fn(nu, |_, _| rng.random_range(-3.0..3.0)))
            .collect()
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let m = GruModel::new(
            GruParams::zeros(3, 2, 1),
            AffineScaler::identity(2),
            AffineScaler::identity(1),
        )
        .unwrap();
        let (next, y) = m.step(&[0.8, -0.4, 1.0], &[0.3, -7.0]).unwrap();
        assert_eq!(next.as_slice(), &[0.4, -0.2, 0.5]);
        assert_eq!(y.as_slice(), &[0.0]);
    }

    #[test]
    fn zero_state_zero_input_gives_descaled_readout_bias() {
        let mut p = GruParams::zeros(2, 2, 2);
        p.b_out = DVector::from_vec(vec![0.5, -1.0]);
        let out_s = AffineScaler::new(vec![10.0, 1.0], vec![2.0, 4.0]).unwrap();
        let m = GruModel::new(p, AffineScaler::identity(2), out_s).unwrap();
        let (_, y) = m.step(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y.as_slice(), &[11.0, -3.0]);
    }

    #[test]
    fn boundary_states_move_strictly_inside() {
        let m = random_model(4, 2, 2, 3, 1.0);
        let (next, _) = m.step(&[1.0, -1.0, 1.0, -1.0], &[0.2, 0.1]).unwrap();
        assert!(next.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn step_rejects_bad_input() {
        let m = random_model(2, 2, 1, 0, 1.0);
        assert!(matches!(m.step(&[0.0], &[0.0, 0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.step(&[0.0, 0.0], &[f64::NAN, 0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rollout_is_chained_steps() {
        let m = random_model(4, 3, 2, 11, 1.0);
        let inputs = random_inputs(3, 5, 12);
        let x0 = [0.1, -0.2, 0.3, 0.0];
        let traj = m.rollout(&x0, &inputs).unwrap();
        assert_eq!(traj.states.len(), 6);
        assert_eq!(traj.outputs.len(), 5);
        let mut x = DVector::from_column_slice(&x0);
        for (k, u) in inputs.iter().enumerate() {
            let (next, y) = m.step(x.as_slice(), u.as_slice()).unwrap();
            assert_eq!(y, traj.outputs[k]);
            x = next;
            assert_eq!(x, traj.states[k + 1]);
        }
        let one = m.rollout(&x0, &inputs[..1]).unwrap();
        let (next, y) = m.step(&x0, inputs[0].as_slice()).unwrap();
        assert_eq!(one.states[1], next);
        assert_eq!(one.outputs[0], y);
    }

    /// Straightforward matrix-expression re-implementation of the GRU.
    fn reference_rollout(m: &GruModel, x0: &[f64], inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let p = m.params();
        let sig = |v: DVector<f64>| v.map(|a| 1.0 / (1.0 + (-a).exp()));
        let mut x = DVector::from_column_slice(x0);
        let mut outs = Vec::new();
        for u in inputs {
            let us = DVector::from_iterator(
                u.len(),
                u.iter()
                    .enumerate()
                    .map(|(i, v)| (v - m.input_scaler().offset()[i]) / m.input_scaler().gain()[i]),
            );
            let ys = &p.c_out * &x + &p.d_out * &us + &p.b_out;
            outs.push(DVector::from_iterator(
                ys.len(),
                ys.iter().enumerate().map(|(i, v)| {
                    m.output_scaler().offset()[i] + m.output_scaler().gain()[i] * v
                }),
            ));
            let z = sig(&p.w_update * &us + &p.u_update * &x + &p.b_update);
            let r = sig(&p.w_reset * &us + &p.u_reset * &x + &p.b_reset);
            let c = (&p.w_cand * &us + &p.u_cand * r.component_mul(&x) + &p.b_cand).map(f64::tanh);
            x = (DVector::from_element(x.len(), 1.0) - &z).component_mul(&x) + z.component_mul(&c);
        }
        outs
    }

    #[test]
    fn rollout_matches_reference_implementation() {
        for seed in 0..5 {
            let m = random_model(5, 3, 4, seed, 1.5);
            let inputs = random_inputs(3, 20, seed + 100);
            let x0 = [0.2, -0.5, 0.9, 0.0, -1.0];
            let traj = m.rollout(&x0, &inputs).unwrap();
            let reference = reference_rollout(&m, &x0, &inputs);
            for (a, b) in traj.outputs.iter().zip(&reference) {
                for (va, vb) in a.iter().zip(b.iter()) {
                    assert!((va - vb).abs() <= 1e-12 * (1.0 + vb.abs()), "{va} vs {vb}");
                }
            }
        }
    }

    fn loss(m: &GruModel, x0: &[f64], inputs: &[DVector<f64>], weights: &[DVector<f64>]) -> f64 {
        let traj = m.rollout(x0, inputs).unwrap();
        traj.outputs
            .iter()
            .zip(weights)
            .map(|(y, w)| y.dot(w))
            .sum::<f64>()
    }

    #[test]
    fn zero_adjoints_give_zero_gradients() {
        let m = random_model(3, 2, 2, 1, 1.0);
        let inputs = random_inputs(2, 4, 2);
        let traj = m.rollout(&[0.0; 3], &inputs).unwrap();
        let zero = vec![DVector::zeros(2); 4];
        let g = m.rollout_vjp(&traj.tape, &zero, &[0.0; 3]).unwrap();
        assert!(g.inputs.iter().all(|v| v.iter().all(|a| *a == 0.0)));
        assert!(g.x0.iter().all(|a| *a == 0.0));
        assert_eq!(g.params.norm(), 0.0);
    }

    #[test]
    fn vjp_of_output_sum_matches_finite_differences() {
        let m = random_model(2, 2, 2, 21, 1.0);
        let inputs = random_inputs(2, 2, 22);
        let x0 = [0.3, -0.6];
        let ones = vec![DVector::from_element(2, 1.0); 2];
        let traj = m.rollout(&x0, &inputs).unwrap();
        let g = m.rollout_vjp(&traj.tape, &ones, &[0.0, 0.0]).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()).max(1e-3),
                "analytic {analytic} vs fd {fd}"
            );
        };
        for k in 0..2 {
            for j in 0..2 {
                let mut up = inputs.clone();
                up[k][j] += h;
                let mut dn = inputs.clone();
                dn[k][j] -= h;
                check(g.inputs[k][j], loss(&m, &x0, &up, &ones), loss(&m, &x0, &dn, &ones));
            }
        }
        for i in 0..2 {
            let mut up = x0;
            up[i] += h;
            let mut dn = x0;
            dn[i] -= h;
            check(g.x0[i], loss(&m, &up, &inputs, &ones), loss(&m, &dn, &inputs, &ones));
        }
        let flat = m.params().to_flat();
        let grad = g.params.to_flat();
        for idx in 0..flat.len() {
            let mut p = m.params().clone();
            let mut v = flat.clone();
            v[idx] += h;
            p.set_flat(&v);
            let up = m.with_params(p.clone()).unwrap();
            v[idx] -= 2.0 * h;
            p.set_flat(&v);
            let dn = m.with_params(p).unwrap();
            check(grad[idx], loss(&up, &x0, &inputs, &ones), loss(&dn, &x0, &inputs, &ones));
        }
    }

    #[test]
    fn x0_gradient_decays_through_a_contraction() {
        // Small recurrent weights make each step a contraction; the gradient of
        // the terminal state with respect to x0 then shrinks at least as fast as
        // the product of the per-step Jacobian norm bounds.
        let m = random_model(3, 2, 1, 5, 0.3);
        let x0 = [0.2, -0.1, 0.4];
        let inputs = random_inputs(2, 12, 6);
        let no_out = vec![DVector::zeros(1); 12];
        let mut norms = Vec::new();
        for t in 1..=12 {
            let traj = m.rollout(&x0, &inputs[..t]).unwrap();
            let g = m.rollout_vjp(&traj.tape, &no_out[..t], &[1.0, 1.0, 1.0]).unwrap();
            norms.push(g.x0.norm());
        }
        // per-step Jacobian bound via finite differences at each visited state
        let traj = m.rollout(&x0, &inputs).unwrap();
        let mut bound = 3f64.sqrt();
        for t in 0..12 {
            let x = traj.states[t].clone();
            let mut jac = DMatrix::zeros(3, 3);
            for j in 0..3 {
                let mut up = x.clone();
                up[j] += 1e-6;
                let mut dn = x.clone();
                dn[j] -= 1e-6;
                let (a, _) = m.step(up.as_slice(), inputs[t].as_slice()).unwrap();
                let (b, _) = m.step(dn.as_slice(), inputs[t].as_slice()).unwrap();
                jac.set_column(j, &((a - b) / 2e-6));
            }
            let sv = jac.singular_values();
            bound *= sv.max();
            assert!(norms[t] <= bound * (1.0 + 1e-5), "step {t}: {} > {bound}", norms[t]);
        }
        assert!(norms[11] < norms[0]);
    }

    #[test]
    fn document_round_trip() {
        let m = random_model(3, 2, 2, 9, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let loaded = GruModel::load(&path).unwrap();
        assert_eq!(loaded, m);
        let mut doc = m.to_document();
        doc.format_version = 99;
        assert!(GruModel::from_document(doc).is_err());
    }

    #[test]
    fn init_is_seeded_and_slows_update_gate() {
        let a = GruModel::init(4, AffineScaler::identity(2), AffineScaler::identity(1), 7).unwrap();
        let b = GruModel::init(4, AffineScaler::identity(2), AffineScaler::identity(1), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.params().b_update.iter().all(|v| *v == -1.0));
        let bound = 0.5;
        assert!(a.params().w_cand.iter().all(|v| v.abs() <= bound));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn states_stay_in_unit_box(
            seed in any::<u64>(),
            spread in 0.1f64..20.0,
            hidden in 1usize..6,
            x0 in prop::collection::vec(-1.0f64..=1.0, 6),
        ) {
            let m = random_model(hidden, 2, 1, seed, spread);
            let inputs = random_inputs(2, 30, seed ^ 0x55);
            let traj = m.rollout(&x0[..hidden], &inputs).unwrap();
            for s in &traj.states {
                prop_assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }
}
