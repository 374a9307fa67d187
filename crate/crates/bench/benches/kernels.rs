use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dhs_ensemble::ensemble::{weights_md, weights_md_jacobian};
use dhs_ensemble_bench::{benchmark, ensemble, expert, inputs};
use nalgebra::DVector;

fn t_squared(c: &mut Criterion) {
    let b = benchmark(1);
    let u = inputs(1, 2)[0].as_slice().to_vec();
    c.bench_function("t_squared", |bench| bench.iter(|| b.t_squared(black_box(&u)).unwrap()));
    c.bench_function("t_squared_gradient", |bench| {
        bench.iter(|| b.t_squared_gradient(black_box(&u)).unwrap())
    });
}

fn md_weights(c: &mut Criterion) {
    let ens = ensemble(2, 8);
    let u = inputs(1, 3)[0].as_slice().to_vec();
    c.bench_function("weights_md", |b| b.iter(|| weights_md(&ens, black_box(&u)).unwrap()));
    c.bench_function("weights_md_jacobian", |b| b.iter(|| weights_md_jacobian(&ens, black_box(&u)).unwrap()));
}

fn rollout(c: &mut Criterion) {
    let mut group = c.benchmark_group("rollout");
    for hidden in [4, 8, 16] {
        let m = expert(hidden, 5);
        let u = inputs(72, 6);
        let x0 = vec![0.0; hidden];
        group.bench_with_input(BenchmarkId::new("forward", hidden), &hidden, |b, _| {
            b.iter(|| m.rollout(black_box(&x0), &u).unwrap())
        });
        let traj = m.rollout(&x0, &u).unwrap();
        let adj: Vec<DVector<f64>> = (0..u.len()).map(|_| DVector::from_element(m.output_size(), 1.0)).collect();
        group.bench_with_input(BenchmarkId::new("vjp", hidden), &hidden, |b, _| {
            b.iter(|| m.rollout_vjp(&traj.tape, black_box(&adj), &x0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, t_squared, md_weights, rollout);
criterion_main!(benches);
