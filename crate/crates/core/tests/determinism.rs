use peerstrat::estimators::estimate_naive;
use peerstrat::{
    bootstrap_ci, fit, generate, AdjustedPipeline, BootstrapConfig, Dataset, DesignMatrix, FitOptions, ModelSpec,
    ScoreMode, SimConfig, SpecName,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn small() -> SimConfig {
    SimConfig { seed: 11, n_users: 2500, n_domains: 6, ..SimConfig::default() }
}

fn naive_stats(ds: &Dataset, w: &[f64]) -> peerstrat::Result<Vec<f64>> {
    let e = estimate_naive(ds, w)?;
    Ok(vec![e.p0, e.rr()])
}

#[test]
fn simulation_does_not_depend_on_thread_count() {
    let a = in_pool(1, || generate(&small()).unwrap());
    let b = in_pool(3, || generate(&small()).unwrap());
    assert_eq!(a.observations(), b.observations());
    assert_eq!(a.users(), b.users());
}

#[test]
fn adjusted_estimate_does_not_depend_on_thread_count() {
    let ds = generate(&small()).unwrap();
    let spec = ModelSpec::new(SpecName::AMs);
    let w = vec![1.0; ds.len()];
    let run = |threads| {
        in_pool(threads, || AdjustedPipeline::new(&ds, &spec).unwrap().estimate(&w, ScoreMode::Refit).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.p0.to_bits(), b.p0.to_bits());
    assert_eq!(a.p1.to_bits(), b.p1.to_bits());
}

#[test]
fn bootstrap_does_not_depend_on_thread_count() {
    let ds = generate(&small()).unwrap();
    let config = BootstrapConfig { replicates: 30, seed: 4, ..Default::default() };
    let names = vec!["p0".to_string(), "rr".to_string()];
    let run = |threads| in_pool(threads, || bootstrap_ci(&ds, &config, &names, |w| naive_stats(&ds, w)).unwrap());
    let (a, b) = (run(1), run(3));
    for (x, y) in a.intervals.iter().zip(&b.intervals) {
        assert_eq!(x.low.to_bits(), y.low.to_bits());
        assert_eq!(x.high.to_bits(), y.high.to_bits());
    }
}

fn problem(seed: u64, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<bool>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y = x.iter().map(|r| rng.random_bool(if r[0] > 0.0 { 0.7 } else { 0.3 })).collect();
    let w = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    (x, y, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fit_is_invariant_to_row_order(seed in 0u64..1000, n in 20usize..80, p in 1usize..6) {
        let (x, y, w) = problem(seed, n, p);
        let cols: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let xp: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let yp: Vec<bool> = order.iter().map(|&i| y[i]).collect();
        let wp: Vec<f64> = order.iter().map(|&i| w[i]).collect();
        let opts = FitOptions::with_lambda(0.5);
        let a = fit(&DesignMatrix::from_dense(cols.clone(), y.clone(), &x), &y, &w, &opts).unwrap();
        let b = fit(&DesignMatrix::from_dense(cols, yp.clone(), &xp), &yp, &wp, &opts).unwrap();
        prop_assert!((a.intercept - b.intercept).abs() < 1e-8);
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn penalty_shrinks_coefficient_norm(seed in 0u64..1000) {
        let (x, y, w) = problem(seed, 60, 4);
        let cols: Vec<String> = (0..4).map(|j| format!("x{j}")).collect();
        let d = DesignMatrix::from_dense(cols, y.clone(), &x);
        let norm = |lambda: f64| {
            let f = fit(&d, &y, &w, &FitOptions::with_lambda(lambda)).unwrap();
            f.coefficients.iter().map(|b| b * b).sum::<f64>()
        };
        prop_assert!(norm(50.0) <= norm(0.5) + 1e-12);
    }
}
