use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hahe_bench::{bench_config, bench_dataset};
use hahe_core::eval::multi_position_predict;
use hahe_core::local::SequenceBatch;
use hahe_core::numerics::{masked_softmax, matmul, normal};
use hahe_core::training::{split_samples, Trainer};
use hahe_core::hkg::HFact;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("kernels");
    for n in [64, 256] {
        let a = normal(&[n, n], 1.0, &mut rng);
        let b = normal(&[n, n], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::new("matmul", n), &n, |bench, _| bench.iter(|| matmul(&a, &b).unwrap()));
        let valid: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.8)).collect();
        g.bench_with_input(BenchmarkId::new("masked_softmax", n), &n, |bench, _| {
            bench.iter(|| masked_softmax(&a, &valid).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let ds = bench_dataset();
    let samples = split_samples(&ds.train);
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    for dim in [32, 64] {
        let mut trainer = Trainer::new(bench_config(dim), &ds).unwrap();
        let positions: Vec<[usize; 1]> = samples[..128].iter().map(|s| [s.position]).collect();
        let queries: Vec<(&HFact, &[usize])> = samples[..128].iter().zip(&positions).map(|(s, p)| (&ds.train[s.fact], &p[..])).collect();
        let batch = SequenceBatch::new(&queries, &ds.vocab).unwrap();
        g.bench_with_input(BenchmarkId::new("step_128", dim), &dim, |bench, _| bench.iter(|| trainer.step(&batch).unwrap()));
        let trainer = Trainer::new(bench_config(dim), &ds).unwrap();
        g.bench_with_input(BenchmarkId::new("evaluate_20_facts", dim), &dim, |bench, _| {
            bench.iter(|| trainer.evaluate(&ds.test, None).unwrap())
        });
    }
    g.finish();
}

fn joint_prediction(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let marginals: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let raw: Vec<f64> = (0..5000).map(|_| rng.random_range(-5.0..5.0)).collect();
            let z = raw.iter().map(|v| v.exp()).sum::<f64>().ln();
            raw.iter().map(|v| v - z).collect()
        })
        .collect();
    c.bench_function("multi_position_predict_3x5000_beam100_keep100", |b| {
        b.iter(|| multi_position_predict(&marginals, 100, 100).unwrap())
    });
}

criterion_group!(benches, kernels, training, joint_prediction);
criterion_main!(benches);
