use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dhs_ensemble::ensemble::weights_av;
use dhs_ensemble::mhe::{solve_mhe, MheConfig};
use dhs_ensemble::mpc::{solve_mpc, MpcConfig, WeightPlan};
use dhs_ensemble_bench::{ensemble, expert, mhe_window, mpc_problem};
use nalgebra::DVector;

fn mpc(c: &mut Criterion) {
    let mut group = c.benchmark_group("mpc_solve");
    group.sample_size(20);
    let ens = ensemble(2, 8);
    for horizon in [12, 24] {
        let config = MpcConfig {
            horizon,
            ..MpcConfig::default()
        };
        let warm = vec![DVector::from_vec(vec![75.0, 0.0]); horizon];
        let plans = [
            ("av", WeightPlan::Fixed(vec![weights_av(2).unwrap(); horizon + 1])),
            ("md2", WeightPlan::Mahalanobis),
        ];
        for (tag, plan) in plans {
            let problem = mpc_problem(&ens, horizon, plan);
            group.bench_with_input(BenchmarkId::new(tag, horizon), &horizon, |b, _| {
                b.iter(|| solve_mpc(&ens, &problem, &warm, &config).unwrap())
            });
        }
    }
    group.finish();
}

fn mhe(c: &mut Criterion) {
    let mut group = c.benchmark_group("mhe_solve");
    group.sample_size(20);
    let m = expert(8, 9);
    for horizon in [6, 12] {
        let config = MheConfig {
            horizon,
            ..MheConfig::default()
        };
        let window = mhe_window(&m, horizon);
        group.bench_with_input(BenchmarkId::from_parameter(horizon), &horizon, |b, _| {
            b.iter(|| {
                let mut state = window.clone();
                solve_mhe(&m, &mut state, 0, &config).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, mpc, mhe);
criterion_main!(benches);
