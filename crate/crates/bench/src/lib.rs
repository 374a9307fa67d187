//! Seeded fixtures shared by the benchmarks: untrained experts with the
//! plant's channel layout and scalings.

use dhs_ensemble::ensemble::Ensemble;
use dhs_ensemble::mhe::MheState;
use dhs_ensemble::mpc::{ChannelLayout, MpcProblem, StageBounds, WeightPlan};
use dhs_ensemble::recmodel::{AffineScaler, GruModel};
use dhs_ensemble::stats::BenchmarkStats;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INPUTS: [&str; 4] = ["T0_s", "q_tes", "P1_c", "P2_c"];
pub const OUTPUTS: [&str; 8] = ["T0_r", "q0", "T1_s", "T2_s", "T1_c", "T2_c", "q1_c", "q2_c"];

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn expert(hidden: usize, seed: u64) -> GruModel {
    let s_in = AffineScaler::new(vec![75.0, 0.0, 100e3, 100e3], vec![10.0, 15.0, 60e3, 60e3]).unwrap();
    let s_out = AffineScaler::new(
        vec![55.0, 6.0, 72.0, 70.0, 50.0, 50.0, 3.0, 3.0],
        vec![5.0, 4.0, 8.0, 8.0, 5.0, 5.0, 2.0, 2.0],
    )
    .unwrap();
    let mut m = GruModel::init(hidden, s_in, s_out, seed).unwrap();
    m.set_channel_names(names(&INPUTS), names(&OUTPUTS)).unwrap();
    m
}

pub fn benchmark(seed: u64) -> BenchmarkStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = DVector::from_vec(vec![
        rng.random_range(70.0..80.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(60e3..140e3),
        rng.random_range(60e3..140e3),
    ]);
    let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![30.0, 10.0, 1e9, 1e9]));
    BenchmarkStats::from_parts(names(&INPUTS), mean, cov, 0.0).unwrap()
}

pub fn ensemble(n: usize, hidden: usize) -> Ensemble {
    let experts = (0..n).map(|i| expert(hidden, 100 + i as u64)).collect();
    let benches = (0..n).map(|i| benchmark(200 + i as u64)).collect();
    Ensemble::new(experts, benches, 1e-6).unwrap()
}

pub fn inputs(steps: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| {
            DVector::from_vec(vec![
                rng.random_range(65.0..85.0),
                rng.random_range(-15.0..15.0),
                rng.random_range(30e3..170e3),
                rng.random_range(30e3..170e3),
            ])
        })
        .collect()
}

/// MPC problem over `horizon` stages with the default output bounds.
pub fn mpc_problem(ens: &Ensemble, horizon: usize, weights: WeightPlan) -> MpcProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ny = OUTPUTS.len();
    let layout = ChannelLayout::from_output_names(&names(&OUTPUTS)).unwrap();
    let mut lower = vec![f64::NEG_INFINITY; ny];
    let mut upper = vec![f64::INFINITY; ny];
    (lower[0], upper[0]) = (50.0, 75.0);
    (lower[1], upper[1]) = (2.0, 25.0);
    (lower[2], upper[2]) = (73.0, 85.0);
    (lower[3], upper[3]) = (73.0, 85.0);
    MpcProblem {
        initial_states: ens
            .experts()
            .iter()
            .map(|e| DVector::from_fn(e.hidden_size(), |_, _| rng.random_range(-0.5..0.5)))
            .collect(),
        disturbances: (0..horizon)
            .map(|_| vec![rng.random_range(60e3..140e3), rng.random_range(60e3..140e3)])
            .collect(),
        price: (0..=horizon).map(|k| if k % 12 < 6 { 0.1 } else { 0.2 }).collect(),
        bounds: (0..=horizon)
            .map(|_| StageBounds {
                lower: lower.clone(),
                upper: upper.clone(),
            })
            .collect(),
        weights,
        layout,
    }
}

/// A full MHE window of measurements generated by the expert itself.
pub fn mhe_window(model: &GruModel, horizon: usize) -> MheState {
    let u = inputs(horizon, 11);
    let traj = model.rollout(&vec![0.2; model.hidden_size()], &u).unwrap();
    let mut state = MheState::new(horizon, &[model.hidden_size()]).unwrap();
    for (u, y) in u.iter().zip(&traj.outputs) {
        state.push_measurement(u.as_slice(), y.as_slice()).unwrap();
    }
    state
}
