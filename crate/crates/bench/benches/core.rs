use allpairs::bilip::{state, Diffeomorphism, DEFAULT_INVERSE_TOL, DEFAULT_MAX_ITER};
use allpairs::flow::{natural_field, rollout_analytic, FlowConfig};
use allpairs::train::separation_loss_grad;
use allpairs::LabeledDatasets;
use allpairs_bench::corridor_fixture;
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn maps(c: &mut Criterion) {
    let (map, _) = corridor_fixture(50);
    let x = state(&[0.4, 1.7]);
    let z = map.forward(&x);
    c.bench_function("forward", |b| b.iter(|| map.forward(black_box(&x))));
    c.bench_function("forward_jacobian", |b| b.iter(|| map.forward_jacobian(black_box(&x))));
    c.bench_function("inverse", |b| {
        b.iter(|| map.inverse(black_box(&z), DEFAULT_INVERSE_TOL, DEFAULT_MAX_ITER).unwrap())
    });
}

fn flows(c: &mut Criterion) {
    let (map, _) = corridor_fixture(50);
    let cfg = FlowConfig::new(1.0);
    let (x0, goal) = (state(&[0.4, 1.7]), state(&[1.5, 1.0]));
    c.bench_function("natural_field", |b| {
        b.iter(|| natural_field(&map, black_box(&x0), &goal, &cfg).unwrap())
    });
    let times: Vec<f64> = (0..200).map(|i| 0.025 * i as f64).collect();
    c.bench_function("rollout_analytic_200", |b| {
        b.iter(|| rollout_analytic(&map, black_box(&x0), &goal, &cfg, &times).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let (map, data) = corridor_fixture(200);
    // One minibatch at the default batch size.
    let batch = LabeledDatasets {
        safe: data.safe[..8].to_vec(),
        unsafe_: data.unsafe_[..8].to_vec(),
        demo: Vec::new(),
        ..data
    };
    c.bench_function("separation_grad_batch16", |b| {
        b.iter(|| separation_loss_grad(black_box(&map), &batch, 1.0).unwrap())
    });
}

criterion_group!(benches, maps, flows, training);
criterion_main!(benches);
