use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use peerstrat::{
    assign_strata, bootstrap_ci, estimate_adjusted, estimate_naive, fit, generate, strata_p0, BootstrapConfig,
    DesignMatrix, FitOptions, ModelSpec, SimConfig, SpecName, StrataPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sparse_problem(n: usize, p: usize, density: f64) -> (DesignMatrix, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut dense = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> =
            (0..p).map(|_| if rng.random_bool(density) { rng.random_range(0.0..3.0) } else { 0.0 }).collect();
        let eta = row.iter().take(10).sum::<f64>() * 0.2 - 1.0;
        labels.push(rng.random_bool(1.0 / (1.0 + (-eta).exp())));
        dense.push(row);
    }
    let columns = (0..p).map(|j| format!("x{j}")).collect();
    (DesignMatrix::from_dense(columns, labels.clone(), &dense), labels)
}

fn bench_fit(c: &mut Criterion) {
    let mut g = c.benchmark_group("ridge_logit");
    for (n, p) in [(5_000, 50), (5_000, 800)] {
        let (design, labels) = sparse_problem(n, p, 0.05);
        let w = vec![1.0; n];
        g.bench_function(format!("fit_{n}x{p}"), |b| {
            b.iter(|| fit(&design, &labels, &w, &FitOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn bench_stratify(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool(s)).collect();
    let outcomes: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
    let w = vec![1.0; n];
    c.bench_function("stratify_100k", |b| {
        b.iter(|| {
            let a = assign_strata(&scores, &labels, &w, &StrataPolicy::default());
            strata_p0(&a, &scores, &labels, &outcomes, &w).unwrap()
        })
    });
}

fn bench_simulate(c: &mut Criterion) {
    let config = SimConfig { n_users: 5_000, ..SimConfig::default() };
    c.bench_function("simulate_5k_users", |b| b.iter(|| generate(&config).unwrap()));
}

fn bench_estimate(c: &mut Criterion) {
    let ds = generate(&SimConfig { n_users: 5_000, ..SimConfig::default() }).unwrap();
    let ones = vec![1.0; ds.len()];
    let spec = ModelSpec::new(SpecName::AMs);
    c.bench_function("adjusted_AMs_5k_users", |b| b.iter(|| estimate_adjusted(&ds, &spec, &ones).unwrap()));
    let config = BootstrapConfig { replicates: 20, ..BootstrapConfig::default() };
    let names = vec!["rr".to_string()];
    c.bench_function("bootstrap_naive_20", |b| {
        b.iter_batched(
            || config.clone(),
            |cfg| bootstrap_ci(&ds, &cfg, &names, |w| Ok(vec![estimate_naive(&ds, w)?.rr()])).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_fit, bench_stratify, bench_simulate, bench_estimate
}
criterion_main!(benches);
