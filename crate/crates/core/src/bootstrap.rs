//! Multiway (user × item) cluster bootstrap.
//!
//! Each replicate draws one weight per user and one per item. An
//! observation's weight is the product of its user's and item's weights, and
//! the full weighted pipeline is rerun on those weights.
//!
//! Replicate `r` seeds its own ChaCha8 generator from `(seed, r)`, so results
//! do not depend on scheduling or thread count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data_model::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Resample each factor's clusters with replacement.
    #[default]
    Multinomial,
    /// Independent Poisson(1) weight per cluster.
    Poisson,
    /// Every weight is one; replicates reproduce the point estimate.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// `point ± z · sd`.
    #[default]
    Normal,
    /// Empirical quantiles of the product-weight replicates (diagnostic).
    Percentile,
}

/// How the replicate variance is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// Variance of the product-weight replicates.
    ProductWeights,
    /// `V_user + V_item − V_obs`, each from its own one-factor replicates;
    /// falls back to `max(V_user, V_item)` when the difference is not positive.
    #[default]
    TwoWayAdditive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub scheme: WeightScheme,
    pub refit_propensity: bool,
    pub z: f64,
    pub seed: u64,
    pub interval: IntervalKind,
    pub variance: VarianceRule,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 500,
            scheme: WeightScheme::Multinomial,
            refit_propensity: true,
            z: 1.959964,
            seed: 0,
            interval: IntervalKind::Normal,
            variance: VarianceRule::TwoWayAdditive,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("bootstrap needs at least 2 replicates, got {}", self.replicates)));
        }
        if !(self.z > 0.0) || !self.z.is_finite() {
            return Err(Error::Config(format!("z must be positive, got {}", self.z)));
        }
        Ok(())
    }
}

/// Which factors a replicate's weights resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    /// Users and items; observation weight `w_user · v_item`.
    Both,
    User,
    Item,
    /// Each observation independently.
    Observation,
}

const USER_STREAM: u64 = 0;
const ITEM_STREAM: u64 = 1;
const OBS_STREAM: u64 = 2;

fn replicate_rng(seed: u64, replicate: usize, stream: u64) -> ChaCha8Rng {
    // SplitMix64 finalizer on the pair.
    let mut z = seed ^ (replicate as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(stream);
    rng
}

/// Per-cluster weights for `n` clusters.
pub fn cluster_weights(n: usize, scheme: WeightScheme, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match scheme {
        WeightScheme::Unit => vec![1.0; n],
        WeightScheme::Multinomial => {
            let mut counts = vec![0.0; n];
            if n > 0 {
                for _ in 0..n {
                    counts[rng.random_range(0..n)] += 1.0;
                }
            }
            counts
        }
        WeightScheme::Poisson => {
            let p = Poisson::new(1.0).expect("valid rate");
            (0..n).map(|_| p.sample(rng)).collect()
        }
    }
}

/// Observation weights for one replicate.
pub fn replicate_weights(dataset: &Dataset, config: &BootstrapConfig, replicate: usize, factor: Factor) -> Vec<f64> {
    let obs = dataset.observations();
    let draw = |stream, n| cluster_weights(n, config.scheme, &mut replicate_rng(config.seed, replicate, stream));
    match factor {
        Factor::Both => {
            let u = draw(USER_STREAM, dataset.users().len());
            let v = draw(ITEM_STREAM, dataset.items().len());
            obs.iter().map(|o| u[o.user as usize] * v[o.item as usize]).collect()
        }
        Factor::User => {
            let u = draw(USER_STREAM, dataset.users().len());
            obs.iter().map(|o| u[o.user as usize]).collect()
        }
        Factor::Item => {
            let v = draw(ITEM_STREAM, dataset.items().len());
            obs.iter().map(|o| v[o.item as usize]).collect()
        }
        Factor::Observation => draw(OBS_STREAM, obs.len()),
    }
}

/// A point estimate with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub point: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub low: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub high: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub sd: f64,
    /// Replicates with a finite value for this quantity.
    pub replicates: usize,
}

impl Interval {
    pub fn covers(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub names: Vec<String>,
    pub point: Vec<f64>,
    pub intervals: Vec<Interval>,
    /// Replicate values per factor set, `NaN` for dropped replicates.
    pub replicates: Vec<(Factor, Vec<Vec<f64>>)>,
    pub dropped: usize,
}

impl BootstrapResult {
    pub fn interval(&self, name: &str) -> Option<&Interval> {
        self.names.iter().position(|n| n == name).map(|i| &self.intervals[i])
    }

    /// Writes every replicate value, one row per (factor, replicate).
    pub fn write_replicates_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["factor".to_string(), "replicate".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (factor, reps) in &self.replicates {
            let label = match factor {
                Factor::Both => "user_item",
                Factor::User => "user",
                Factor::Item => "item",
                Factor::Observation => "observation",
            };
            for (r, values) in reps.iter().enumerate() {
                let mut rec = vec![label.to_string(), r.to_string()];
                rec.extend(values.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn variance(values: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n < 2 {
        return (f64::NAN, n);
    }
    // Shifted by the first value so that identical replicates give exactly 0.
    let shift = finite[0];
    let mean = finite.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    (finite.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / (n - 1) as f64, n)
}

/// Type-7 sample quantile of sorted finite values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs `statistic` on every replicate and forms intervals around
/// `statistic(ones)`.
///
/// `statistic` maps observation weights to one value per name. Replicates
/// whose error is a zero-weight condition are dropped; more than 10% dropped
/// replicates in any factor set is an error.
pub fn bootstrap_ci<F>(dataset: &Dataset, config: &BootstrapConfig, names: &[String], statistic: F) -> Result<BootstrapResult>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    config.validate()?;
    let point = statistic(&vec![1.0; dataset.len()])?;
    if point.len() != names.len() {
        return Err(Error::DimensionMismatch(format!("{} names for {} statistics", names.len(), point.len())));
    }
    let factors: &[Factor] = match (config.interval, config.variance) {
        (IntervalKind::Normal, VarianceRule::TwoWayAdditive) => &[Factor::User, Factor::Item, Factor::Observation],
        (IntervalKind::Percentile, _) | (_, VarianceRule::ProductWeights) => &[Factor::Both],
    };

    let mut sets = Vec::new();
    let mut dropped = 0;
    for &factor in factors {
        let reps = (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                let w = replicate_weights(dataset, config, r, factor);
                match statistic(&w) {
                    Ok(v) => Ok(Some(v)),
                    Err(e) if e.is_zero_weight() => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let n_dropped = reps.iter().filter(|r| r.is_none()).count();
        if n_dropped * 10 > config.replicates {
            return Err(Error::TooManyDroppedReplicates { dropped: n_dropped, total: config.replicates });
        }
        dropped += n_dropped;
        let reps: Vec<Vec<f64>> = reps.into_iter().map(|r| r.unwrap_or_else(|| vec![f64::NAN; names.len()])).collect();
        sets.push((factor, reps));
    }

    let column = |set: &Vec<Vec<f64>>, q: usize| -> Vec<f64> { set.iter().map(|r| r[q]).collect() };
    let intervals = (0..names.len())
        .map(|q| {
            let p = point[q];
            match (config.interval, config.variance) {
                (IntervalKind::Percentile, _) => {
                    let mut v: Vec<f64> = column(&sets[0].1, q).into_iter().filter(|x| x.is_finite()).collect();
                    v.sort_by(f64::total_cmp);
                    let (var, n) = variance(&v);
                    if n < 2 {
                        return nan_interval(p, n);
                    }
                    let alpha = 2.0 * (1.0 - normal_cdf(config.z));
                    Interval { point: p, low: quantile(&v, alpha / 2.0), high: quantile(&v, 1.0 - alpha / 2.0), sd: var.sqrt(), replicates: n }
                }
                (IntervalKind::Normal, VarianceRule::ProductWeights) => {
                    let (var, n) = variance(&column(&sets[0].1, q));
                    normal_interval(p, var, n, config.z)
                }
                (IntervalKind::Normal, VarianceRule::TwoWayAdditive) => {
                    let (vu, nu) = variance(&column(&sets[0].1, q));
                    let (vi, ni) = variance(&column(&sets[1].1, q));
                    let (vo, no) = variance(&column(&sets[2].1, q));
                    let combined = vu + vi - vo;
                    let var = if combined > 0.0 { combined } else { vu.max(vi) };
                    normal_interval(p, var, nu.min(ni).min(no), config.z)
                }
            }
        })
        .collect();
    Ok(BootstrapResult { names: names.to_vec(), point, intervals, replicates: sets, dropped })
}

fn nan_interval(point: f64, n: usize) -> Interval {
    Interval { point, low: f64::NAN, high: f64::NAN, sd: f64::NAN, replicates: n }
}

fn normal_interval(point: f64, var: f64, n: usize, z: f64) -> Interval {
    if !var.is_finite() || n < 2 {
        return nan_interval(point, n);
    }
    let sd = var.max(0.0).sqrt();
    Interval { point, low: point - z * sd, high: point + z * sd, sd, replicates: n }
}

/// Standard normal CDF; maps `z` to the percentile-interval level.
fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Arm, DatasetBuilder, ObservationRecord, Provenance, UserFeatures};
    use crate::estimators::estimate_experimental;

    fn dataset(n_users: usize, per_user: usize) -> Dataset {
        let mut b = DatasetBuilder::new();
        let mut row = 0;
        for u in 0..n_users {
            b.set_user_features(row, &format!("u{u}"), UserFeatures::default()).unwrap();
            for k in 0..per_user {
                row += 1;
                let arm = match (u + k) % 3 {
                    0 => Arm::Exposed,
                    1 => Arm::ExperimentalControl,
                    _ => Arm::NecgUnexposed,
                };
                b.push(
                    row,
                    ObservationRecord {
                        user_id: format!("u{u}"),
                        item_id: format!("i{}", (u * 7 + k) % 50),
                        domain_id: "d".into(),
                        arm,
                        outcome: (u * 13 + k * 5) % 4 == 0,
                        confounder: None,
                    },
                )
                .unwrap();
            }
        }
        b.build(Provenance::default())
    }

    fn rr_stat(ds: &Dataset) -> impl Fn(&[f64]) -> Result<Vec<f64>> + Sync + '_ {
        move |w| {
            let e = estimate_experimental(ds, w)?;
            Ok(vec![e.p0, e.p1, e.rr()])
        }
    }

    fn names() -> Vec<String> {
        ["p0", "p1", "rr"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn multinomial_weights_sum_to_cluster_count() {
        let mut rng = replicate_rng(7, 3, USER_STREAM);
        let w = cluster_weights(100, WeightScheme::Multinomial, &mut rng);
        assert_eq!(w.iter().sum::<f64>(), 100.0);
        assert!(w.iter().all(|x| x.fract() == 0.0 && *x >= 0.0));
    }

    #[test]
    fn weights_depend_only_on_seed_and_replicate() {
        let ds = dataset(30, 4);
        let c = BootstrapConfig { seed: 11, ..BootstrapConfig::default() };
        let a = replicate_weights(&ds, &c, 5, Factor::Both);
        let b = replicate_weights(&ds, &c, 5, Factor::Both);
        assert_eq!(a, b);
        assert_ne!(a, replicate_weights(&ds, &c, 6, Factor::Both));
        // Product structure: user weight times item weight.
        let u = replicate_weights(&ds, &c, 5, Factor::User);
        let v = replicate_weights(&ds, &c, 5, Factor::Item);
        for i in 0..ds.len() {
            assert_eq!(a[i], u[i] * v[i]);
        }
    }

    #[test]
    fn unit_weights_reproduce_point() {
        let ds = dataset(40, 3);
        for variance in [VarianceRule::ProductWeights, VarianceRule::TwoWayAdditive] {
            let c = BootstrapConfig { replicates: 20, scheme: WeightScheme::Unit, variance, ..Default::default() };
            let r = bootstrap_ci(&ds, &c, &names(), rr_stat(&ds)).unwrap();
            for (_, reps) in &r.replicates {
                for rep in reps {
                    assert_eq!(rep, &r.point);
                }
            }
            for i in &r.intervals {
                assert_eq!(i.sd, 0.0);
                assert_eq!(i.width(), 0.0);
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let ds = dataset(60, 3);
        let c = BootstrapConfig { replicates: 40, seed: 3, ..Default::default() };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| bootstrap_ci(&ds, &c, &names(), rr_stat(&ds)).unwrap());
        let b = four.install(|| bootstrap_ci(&ds, &c, &names(), rr_stat(&ds)).unwrap());
        assert_eq!(a.intervals, b.intervals);
    }

    #[test]
    fn zero_weight_replicates_are_dropped_or_fatal() {
        // A single experimental-control user: often resampled away.
        let ds = dataset(3, 1);
        let c = BootstrapConfig { replicates: 50, seed: 1, variance: VarianceRule::ProductWeights, ..Default::default() };
        let r = bootstrap_ci(&ds, &c, &names(), rr_stat(&ds));
        assert!(matches!(r, Err(Error::TooManyDroppedReplicates { .. })));
    }

    #[test]
    fn percentile_interval_is_ordered() {
        let ds = dataset(80, 3);
        let c = BootstrapConfig { replicates: 60, interval: IntervalKind::Percentile, ..Default::default() };
        let r = bootstrap_ci(&ds, &c, &names(), rr_stat(&ds)).unwrap();
        let i = r.interval("p1").unwrap();
        assert!(i.low <= i.high);
    }

    #[test]
    fn normal_cdf_at_critical_value() {
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn invalid_config() {
        assert!(BootstrapConfig { replicates: 1, ..Default::default() }.validate().is_err());
        assert!(BootstrapConfig { z: 0.0, ..Default::default() }.validate().is_err());
    }
}
