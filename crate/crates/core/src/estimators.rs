//! Experimental, naive and propensity-stratified estimates of p⁽⁰⁾, p⁽¹⁾, RR and δ.
//!
//! Every estimator takes one weight per observation. Unweighted estimates
//! pass a vector of ones; bootstrap replicates pass resampling weights. All
//! observational estimators share one per-domain reduction: a stratum
//! assignment feeds [`strata_p0`], and domains are pooled in vocabulary order
//! with weights `n₁_d / n₁`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::featurize::{build_design, standardize_weighted, DesignMatrix, ModelSpec, SpecName};
use crate::ridge_logit::{fit, predict_scores, FitOptions};
use crate::stratify::{assign_strata, strata_p0, weighted_quantile_cuts, StrataAssignment, StratumSummary};

/// Outcome of one domain's p⁽⁰⁾ computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainFlag {
    Ok,
    /// Propensity fit impossible; the domain used a single stratum.
    DegenerateFallback,
    /// No NECG weight; excluded from pooling.
    NoNecg,
    /// No exposed weight; carries no pooling weight.
    NoExposed,
}

impl DomainFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainFlag::Ok => "ok",
            DomainFlag::DegenerateFallback => "degenerate_fallback",
            DomainFlag::NoNecg => "no_necg",
            DomainFlag::NoExposed => "no_exposed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEstimate {
    pub domain_id: String,
    pub n_exposed: f64,
    pub n_necg: f64,
    pub p0: Option<f64>,
    pub flag: DomainFlag,
    pub requested_strata: usize,
    pub n_strata: usize,
    pub merged_strata: usize,
    pub converged: Option<bool>,
    #[serde(skip)]
    pub strata: Vec<StratumSummary>,
}

impl DomainEstimate {
    fn empty(domain_id: &str, n_exposed: f64, n_necg: f64, flag: DomainFlag) -> Self {
        DomainEstimate {
            domain_id: domain_id.to_string(),
            n_exposed,
            n_necg,
            p0: None,
            flag,
            requested_strata: 0,
            n_strata: 0,
            merged_strata: 0,
            converged: None,
            strata: Vec::new(),
        }
    }
}

/// A pooled estimate. `rr` and `delta` are always derived from `p0` and `p1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub estimator: String,
    pub p0: f64,
    pub p1: f64,
    pub domains: Vec<DomainEstimate>,
}

impl EffectEstimate {
    pub fn rr(&self) -> f64 {
        self.p1 / self.p0
    }

    pub fn delta(&self) -> f64 {
        self.p1 - self.p0
    }

    /// Domains whose flag is not [`DomainFlag::Ok`].
    pub fn flagged(&self) -> impl Iterator<Item = &DomainEstimate> {
        self.domains.iter().filter(|d| d.flag != DomainFlag::Ok)
    }
}

#[derive(Serialize, Deserialize)]
struct EffectEstimateRecord {
    estimator: String,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    p0: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    p1: f64,
    #[serde(default, skip_deserializing)]
    rr: f64,
    #[serde(default, skip_deserializing)]
    delta: f64,
    #[serde(default)]
    domains: Vec<DomainEstimate>,
}

impl Serialize for EffectEstimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EffectEstimateRecord {
            estimator: self.estimator.clone(),
            p0: self.p0,
            p1: self.p1,
            rr: self.rr(),
            delta: self.delta(),
            domains: self.domains.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EffectEstimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = EffectEstimateRecord::deserialize(d)?;
        Ok(EffectEstimate { estimator: r.estimator, p0: r.p0, p1: r.p1, domains: r.domains })
    }
}

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Experimental,
    /// Domain-post-stratified NECG rate.
    Naive,
    /// NECG rate pooled over all domains; diagnostic only.
    GrandNaive,
    Adjusted(SpecName),
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Experimental => "exp",
            Estimator::Naive => "naive",
            Estimator::GrandNaive => "grand_naive",
            Estimator::Adjusted(s) => s.as_str(),
        }
    }

    /// Maps a spec name to its estimator; `naive` maps to [`Estimator::Naive`].
    pub fn for_spec(name: SpecName) -> Self {
        if name == SpecName::Naive {
            Estimator::Naive
        } else {
            Estimator::Adjusted(name)
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" | "experimental" => Ok(Estimator::Experimental),
            "grand_naive" => Ok(Estimator::GrandNaive),
            other => other.parse::<SpecName>().map(Estimator::for_spec),
        }
    }
}

fn check_weights(dataset: &Dataset, weights: &[f64]) -> Result<()> {
    if weights.len() != dataset.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} observations",
            weights.len(),
            dataset.len()
        )));
    }
    Ok(())
}

fn arm_rate(dataset: &Dataset, weights: &[f64], arm: Arm) -> Option<f64> {
    let mut n = 0.0;
    let mut y = 0.0;
    for (o, &w) in dataset.observations().iter().zip(weights) {
        if o.arm == arm && w != 0.0 {
            n += w;
            if o.outcome {
                y += w;
            }
        }
    }
    (n > 0.0).then(|| y / n)
}

/// Mean outcome over exposed observations.
pub fn estimate_p1(dataset: &Dataset, weights: &[f64]) -> Result<f64> {
    check_weights(dataset, weights)?;
    arm_rate(dataset, weights, Arm::Exposed).ok_or(Error::NoExposed)
}

/// `p0` from the randomized holdout of would-be-exposed pairs.
pub fn estimate_experimental(dataset: &Dataset, weights: &[f64]) -> Result<EffectEstimate> {
    let p1 = estimate_p1(dataset, weights)?;
    let p0 = arm_rate(dataset, weights, Arm::ExperimentalControl).ok_or(Error::NoExperimentalControl)?;
    Ok(EffectEstimate { estimator: Estimator::Experimental.label().into(), p0, p1, domains: Vec::new() })
}

/// NECG rate over all domains at once.
pub fn estimate_grand_naive(dataset: &Dataset, weights: &[f64]) -> Result<EffectEstimate> {
    let p1 = estimate_p1(dataset, weights)?;
    let p0 = arm_rate(dataset, weights, Arm::NecgUnexposed).ok_or(Error::NoNecg)?;
    Ok(EffectEstimate { estimator: Estimator::GrandNaive.label().into(), p0, p1, domains: Vec::new() })
}

/// Exposed and NECG rows of one domain, in table order.
struct DomainRows {
    rows: Vec<u32>,
    labels: Vec<bool>,
    outcomes: Vec<bool>,
}

impl DomainRows {
    fn new(dataset: &Dataset, domain: u32) -> Self {
        let obs = dataset.observations();
        let rows: Vec<u32> = dataset
            .domain_rows(domain)
            .iter()
            .copied()
            .filter(|&r| obs[r as usize].arm != Arm::ExperimentalControl)
            .collect();
        let labels = rows.iter().map(|&r| obs[r as usize].arm == Arm::Exposed).collect();
        let outcomes = rows.iter().map(|&r| obs[r as usize].outcome).collect();
        DomainRows { rows, labels, outcomes }
    }

    fn weights(&self, weights: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|&r| weights[r as usize]).collect()
    }

    fn arm_weights(&self, w: &[f64]) -> (f64, f64) {
        let mut n1 = 0.0;
        let mut n0 = 0.0;
        for (&l, &wi) in self.labels.iter().zip(w) {
            if l {
                n1 += wi;
            } else {
                n0 += wi;
            }
        }
        (n1, n0)
    }

    /// Stratified p⁽⁰⁾ for a given assignment.
    fn finish(
        &self,
        domain_id: &str,
        assignment: &StrataAssignment,
        scores: &[f64],
        w: &[f64],
        flag: DomainFlag,
        converged: Option<bool>,
    ) -> Result<DomainEstimate> {
        let r = strata_p0(assignment, scores, &self.labels, &self.outcomes, w)?;
        Ok(DomainEstimate {
            domain_id: domain_id.to_string(),
            n_exposed: r.n_exposed,
            n_necg: r.n_necg,
            p0: Some(r.p0),
            flag,
            requested_strata: r.requested,
            n_strata: assignment.n_strata,
            merged_strata: r.merged,
            converged,
            strata: r.strata,
        })
    }

    /// Single-stratum estimate; also the fallback when no model can be fit.
    fn single(&self, domain_id: &str, w: &[f64], flag: DomainFlag) -> Result<DomainEstimate> {
        let assignment = StrataAssignment::single(self.rows.len());
        self.finish(domain_id, &assignment, &vec![0.0; self.rows.len()], w, flag, None)
    }

    /// Handles domains without weight in one arm; `None` if both arms are present.
    fn screen(&self, domain_id: &str, w: &[f64]) -> Option<DomainEstimate> {
        let (n1, n0) = self.arm_weights(w);
        if n1 <= 0.0 {
            Some(DomainEstimate::empty(domain_id, n1, n0, DomainFlag::NoExposed))
        } else if n0 <= 0.0 {
            Some(DomainEstimate::empty(domain_id, n1, n0, DomainFlag::NoNecg))
        } else {
            None
        }
    }
}

/// Pools per-domain p⁽⁰⁾ in vocabulary order.
fn pool(label: &str, dataset: &Dataset, weights: &[f64], domains: Vec<DomainEstimate>) -> Result<EffectEstimate> {
    let p1 = estimate_p1(dataset, weights)?;
    let n1: f64 = domains.iter().filter(|d| d.p0.is_some()).map(|d| d.n_exposed).sum();
    if n1 <= 0.0 {
        return Err(Error::NoNecg);
    }
    let mut p0 = 0.0;
    for d in &domains {
        if let Some(p) = d.p0 {
            p0 += (d.n_exposed / n1) * p;
        }
    }
    let excluded: Vec<&str> =
        domains.iter().filter(|d| d.flag == DomainFlag::NoNecg).map(|d| d.domain_id.as_str()).collect();
    if !excluded.is_empty() {
        log::debug!("{label}: {} domain(s) without NECG excluded from pooling", excluded.len());
    }
    Ok(EffectEstimate { estimator: label.to_string(), p0, p1, domains })
}

/// Domain-post-stratified naive estimate: the NECG rate of each domain,
/// pooled with exposure weights.
pub fn estimate_naive(dataset: &Dataset, weights: &[f64]) -> Result<EffectEstimate> {
    check_weights(dataset, weights)?;
    let domains = (0..dataset.n_domains() as u32)
        .map(|d| {
            let rows = DomainRows::new(dataset, d);
            let w = rows.weights(weights);
            let id = dataset.domain_id(d);
            match rows.screen(id, &w) {
                Some(e) => Ok(e),
                None => rows.single(id, &w, DomainFlag::Ok),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    pool(Estimator::Naive.label(), dataset, weights, domains)
}

/// Whether bootstrap replicates refit the propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Refit,
    /// Reuse point-estimate scores; anti-conservative intervals.
    Fixed,
}

struct DomainModel {
    rows: DomainRows,
    design: Option<DesignMatrix>,
    point_scores: Option<Vec<f64>>,
}

/// The adjusted pipeline for one spec, with per-domain designs built once.
pub struct AdjustedPipeline<'a> {
    dataset: &'a Dataset,
    spec: ModelSpec,
    domains: Vec<DomainModel>,
}

impl<'a> AdjustedPipeline<'a> {
    pub fn new(dataset: &'a Dataset, spec: &ModelSpec) -> Result<Self> {
        if spec.name == SpecName::Naive {
            return Err(Error::InvalidArgument("the naive spec has no propensity model".into()));
        }
        let domains = (0..dataset.n_domains() as u32)
            .into_par_iter()
            .map(|d| {
                let rows = DomainRows::new(dataset, d);
                let n1 = rows.labels.iter().filter(|&&l| l).count();
                let design = if n1 == 0 || n1 == rows.rows.len() {
                    None
                } else {
                    let design = build_design(dataset, d, spec)?;
                    debug_assert_eq!(design.observation_rows(), &rows.rows[..]);
                    Some(design)
                };
                Ok(DomainModel { rows, design, point_scores: None })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdjustedPipeline { dataset, spec: spec.clone(), domains })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Fits every domain at unit weights and keeps the scores for
    /// [`ScoreMode::Fixed`].
    pub fn cache_point_scores(&mut self) -> Result<()> {
        let ones = vec![1.0; self.dataset.len()];
        let scores = (0..self.domains.len())
            .into_par_iter()
            .map(|d| {
                let m = &self.domains[d];
                let w = m.rows.weights(&ones);
                Ok(match &m.design {
                    Some(design) if m.rows.screen("", &w).is_none() => {
                        self.scores(design, &m.rows.labels, &w)?.map(|(s, _)| s)
                    }
                    _ => None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (m, s) in self.domains.iter_mut().zip(scores) {
            m.point_scores = s;
        }
        Ok(())
    }

    /// Fits and scores one domain; `None` when labels are degenerate.
    fn scores(&self, design: &DesignMatrix, labels: &[bool], w: &[f64]) -> Result<Option<(Vec<f64>, bool)>> {
        let standardized;
        let design = if self.spec.standardize {
            standardized = standardize_weighted(design, w).0;
            &standardized
        } else {
            design
        };
        let options = FitOptions {
            lambda: self.spec.penalty,
            penalty_scale: self.spec.penalty_scale,
            ..FitOptions::default()
        };
        match fit(design, labels, w, &options) {
            Ok(f) => Ok(Some((predict_scores(&f, design)?.scores, f.converged))),
            Err(Error::DegenerateLabels(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn domain(&self, d: usize, weights: &[f64], mode: ScoreMode) -> Result<DomainEstimate> {
        let m = &self.domains[d];
        let id = self.dataset.domain_id(d as u32);
        let w = m.rows.weights(weights);
        if let Some(e) = m.rows.screen(id, &w) {
            return Ok(e);
        }
        let design = m.design.as_ref().expect("domains with both arms have a design");
        let fitted = match mode {
            ScoreMode::Refit => self.scores(design, &m.rows.labels, &w)?,
            ScoreMode::Fixed => m.point_scores.clone().map(|s| (s, true)),
        };
        match fitted {
            Some((scores, converged)) => {
                let assignment = assign_strata(&scores, &m.rows.labels, &w, &self.spec.strata);
                m.rows.finish(id, &assignment, &scores, &w, DomainFlag::Ok, Some(converged))
            }
            None => {
                log::debug!("{id}: degenerate labels under {}; single stratum", self.spec.name);
                m.rows.single(id, &w, DomainFlag::DegenerateFallback)
            }
        }
    }

    pub fn estimate(&self, weights: &[f64], mode: ScoreMode) -> Result<EffectEstimate> {
        check_weights(self.dataset, weights)?;
        let domains = (0..self.domains.len())
            .into_par_iter()
            .map(|d| self.domain(d, weights, mode))
            .collect::<Result<Vec<_>>>()?;
        let contributing = domains.iter().filter(|d| d.p0.is_some()).count();
        if contributing > 0 && domains.iter().all(|d| d.p0.is_none() || d.flag == DomainFlag::DegenerateFallback) {
            return Err(Error::AllDomainsDegenerate(self.spec.name.to_string()));
        }
        pool(self.spec.name.as_str(), self.dataset, weights, domains)
    }
}

/// Propensity-stratified estimate for `spec`.
pub fn estimate_adjusted(dataset: &Dataset, spec: &ModelSpec, weights: &[f64]) -> Result<EffectEstimate> {
    AdjustedPipeline::new(dataset, spec)?.estimate(weights, ScoreMode::Refit)
}

/// Runs any estimator. `spec` supplies model settings for adjusted estimators
/// and is ignored otherwise.
pub fn run_estimator(dataset: &Dataset, estimator: Estimator, spec: Option<&ModelSpec>, weights: &[f64]) -> Result<EffectEstimate> {
    match estimator {
        Estimator::Experimental => estimate_experimental(dataset, weights),
        Estimator::Naive => estimate_naive(dataset, weights),
        Estimator::GrandNaive => estimate_grand_naive(dataset, weights),
        Estimator::Adjusted(name) => {
            let default = ModelSpec::new(name);
            estimate_adjusted(dataset, spec.unwrap_or(&default), weights)
        }
    }
}

/// Domains grouped by prior popularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityBuckets {
    pub requested: usize,
    /// Bucket per domain index; `None` for domains without observations.
    pub bucket: Vec<Option<usize>>,
    /// Inclusive range of prior unique-sharer counts per bucket.
    pub ranges: Vec<(u32, u32)>,
    pub sizes: Vec<usize>,
}

impl PopularityBuckets {
    pub fn n_buckets(&self) -> usize {
        self.sizes.len()
    }

    /// Observation weights restricted to one bucket's domains.
    pub fn restrict(&self, dataset: &Dataset, weights: &[f64], b: usize) -> Vec<f64> {
        dataset
            .observations()
            .iter()
            .zip(weights)
            .map(|(o, &w)| if self.bucket[o.domain as usize] == Some(b) { w } else { 0.0 })
            .collect()
    }

    pub fn domains_in(&self, dataset: &Dataset, b: usize) -> Vec<String> {
        (0..dataset.n_domains())
            .filter(|&d| self.bucket[d] == Some(b))
            .map(|d| dataset.domain_id(d as u32).to_string())
            .collect()
    }
}

/// Buckets domains with observations by type-1 quantiles of their prior
/// unique-sharer counts. Ties share a bucket, so fewer than `k` buckets may
/// result.
pub fn popularity_buckets(dataset: &Dataset, k: usize) -> Result<PopularityBuckets> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("subgroup count must be at least 2, got {k}")));
    }
    if !dataset.features().has_prior_shares {
        return Err(Error::MissingPriorShares("subgroups".into()));
    }
    let counts = dataset.features().prior_unique_sharers(dataset.n_domains());
    let active: Vec<usize> = (0..dataset.n_domains()).filter(|&d| !dataset.domain_rows(d as u32).is_empty()).collect();
    let mut pairs: Vec<(f64, f64)> = active.iter().map(|&d| (f64::from(counts[d]), 1.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cuts = weighted_quantile_cuts(&pairs, k);
    let raw: Vec<usize> = active.iter().map(|&d| cuts.partition_point(|&q| q < f64::from(counts[d]))).collect();
    let mut used: Vec<usize> = raw.clone();
    used.sort_unstable();
    used.dedup();
    let mut bucket = vec![None; dataset.n_domains()];
    let mut ranges = vec![(u32::MAX, 0u32); used.len()];
    let mut sizes = vec![0; used.len()];
    for (&d, &r) in active.iter().zip(&raw) {
        let b = used.binary_search(&r).expect("bucket in use");
        bucket[d] = Some(b);
        ranges[b].0 = ranges[b].0.min(counts[d]);
        ranges[b].1 = ranges[b].1.max(counts[d]);
        sizes[b] += 1;
    }
    if used.len() < k {
        log::warn!("requested {k} popularity subgroups, found {} non-empty", used.len());
    }
    Ok(PopularityBuckets { requested: k, bucket, ranges, sizes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEstimates {
    pub bucket: usize,
    pub min_prior_sharers: u32,
    pub max_prior_sharers: u32,
    pub n_domains: usize,
    pub estimates: Vec<EffectEstimate>,
}

/// Reruns each estimator within each popularity bucket.
pub fn subgroup_by_prior_popularity(
    dataset: &Dataset,
    estimators: &[(Estimator, Option<ModelSpec>)],
    k: usize,
) -> Result<(PopularityBuckets, Vec<SubgroupEstimates>)> {
    let buckets = popularity_buckets(dataset, k)?;
    let ones = vec![1.0; dataset.len()];
    let mut out = Vec::new();
    for b in 0..buckets.n_buckets() {
        let w = buckets.restrict(dataset, &ones, b);
        let estimates = estimators
            .iter()
            .map(|(e, spec)| run_estimator(dataset, *e, spec.as_ref(), &w))
            .collect::<Result<Vec<_>>>()?;
        out.push(SubgroupEstimates {
            bucket: b,
            min_prior_sharers: buckets.ranges[b].0,
            max_prior_sharers: buckets.ranges[b].1,
            n_domains: buckets.sizes[b],
            estimates,
        });
    }
    Ok((buckets, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{DatasetBuilder, ObservationRecord, Provenance, UserFeatures};
    use crate::stratify::StrataPolicy;

    fn push(b: &mut DatasetBuilder, row: &mut usize, user: &str, item: &str, domain: &str, arm: Arm, y: bool) {
        *row += 1;
        b.set_user_features(*row, user, UserFeatures::default()).unwrap();
        b.push(
            *row,
            ObservationRecord {
                user_id: user.into(),
                item_id: item.into(),
                domain_id: domain.into(),
                arm,
                outcome: y,
                confounder: None,
            },
        )
        .unwrap();
    }

    /// Domain `a`: 10 exposed, NECG rate 0.01 (1/100). Domain `b`: 30 exposed,
    /// NECG rate 0.03 (3/100).
    fn two_domains() -> Dataset {
        let mut b = DatasetBuilder::new();
        let mut row = 0;
        for (dom, n1, hits) in [("a", 10, 1), ("b", 30, 3)] {
            for i in 0..n1 {
                push(&mut b, &mut row, &format!("e{dom}{i}"), &format!("{dom}x"), dom, Arm::Exposed, i < 2);
            }
            for i in 0..100 {
                push(&mut b, &mut row, &format!("n{dom}{i}"), &format!("{dom}x"), dom, Arm::NecgUnexposed, i < hits);
            }
            for i in 0..5 {
                push(&mut b, &mut row, &format!("c{dom}{i}"), &format!("{dom}x"), dom, Arm::ExperimentalControl, false);
            }
        }
        b.build(Provenance::default())
    }

    #[test]
    fn pooled_naive_weighted_mean() {
        let ds = two_domains();
        let e = estimate_naive(&ds, &vec![1.0; ds.len()]).unwrap();
        assert!((e.p0 - 0.025).abs() < 1e-15);
        assert_eq!(e.p1, 4.0 / 40.0);
        assert_eq!(e.rr(), e.p1 / e.p0);
        assert_eq!(e.delta(), e.p1 - e.p0);
    }

    #[test]
    fn p1_direct_mean() {
        let mut b = DatasetBuilder::new();
        let mut row = 0;
        for i in 0..10 {
            push(&mut b, &mut row, &format!("u{i}"), "x", "d", Arm::Exposed, i < 2);
        }
        let ds = b.build(Provenance::default());
        assert_eq!(estimate_p1(&ds, &[1.0; 10]).unwrap(), 0.2);
        assert!(matches!(estimate_experimental(&ds, &[1.0; 10]), Err(Error::NoExperimentalControl)));
    }

    #[test]
    fn single_domain_naive_is_raw_rate() {
        let ds = two_domains();
        let mut w = vec![1.0; ds.len()];
        for (o, wi) in ds.observations().iter().zip(w.iter_mut()) {
            if ds.domain_id(o.domain) == "b" {
                *wi = 0.0;
            }
        }
        let e = estimate_naive(&ds, &w).unwrap();
        assert_eq!(e.p0, 0.01);
        assert_eq!(e.domains[1].flag, DomainFlag::NoExposed);
    }

    #[test]
    fn experimental_rate_and_null_effect() {
        let ds = two_domains();
        let e = estimate_experimental(&ds, &vec![1.0; ds.len()]).unwrap();
        assert_eq!(e.p0, 0.0);
        let same = EffectEstimate { estimator: "x".into(), p0: 0.2, p1: 0.2, domains: vec![] };
        assert_eq!(same.rr(), 1.0);
        assert_eq!(same.delta(), 0.0);
    }

    #[test]
    fn one_stratum_adjusted_equals_naive() {
        let ds = two_domains();
        let w = vec![1.0; ds.len()];
        // Users carry no features, so every design column is constant.
        let spec = ModelSpec::new(SpecName::D).with_strata(StrataPolicy::fixed(1));
        let adj = estimate_adjusted(&ds, &spec, &w).unwrap();
        let naive = estimate_naive(&ds, &w).unwrap();
        assert_eq!(adj.p0, naive.p0);
        assert_eq!(adj.p1, naive.p1);
        let adj = estimate_adjusted(&ds, &ModelSpec::new(SpecName::D), &w).unwrap();
        assert_eq!(adj.p0, naive.p0);
    }

    #[test]
    fn serialized_estimate_carries_rr_and_delta() {
        let e = EffectEstimate { estimator: "exp".into(), p0: 1.920e-4, p1: 1.3037e-3, domains: vec![] };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["rr"].as_f64().unwrap(), e.rr());
        let back: EffectEstimate = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn estimator_names() {
        assert_eq!("exp".parse::<Estimator>().unwrap(), Estimator::Experimental);
        assert_eq!("naive".parse::<Estimator>().unwrap(), Estimator::Naive);
        assert_eq!("AMs".parse::<Estimator>().unwrap(), Estimator::Adjusted(SpecName::AMs));
        assert!("Q".parse::<Estimator>().is_err());
    }

    #[test]
    fn domain_without_exposed_changes_nothing() {
        let ds = two_domains();
        let w = vec![1.0; ds.len()];
        let base = estimate_naive(&ds, &w).unwrap();
        let mut b = DatasetBuilder::new();
        let mut row = 0;
        for i in 0..ds.len() {
            let r = ds.record(i);
            push(&mut b, &mut row, &r.user_id, &r.item_id, &r.domain_id, r.arm, r.outcome);
        }
        for i in 0..20 {
            push(&mut b, &mut row, &format!("z{i}"), "zx", "c", Arm::NecgUnexposed, i % 2 == 0);
        }
        let bigger = b.build(Provenance::default());
        let e = estimate_naive(&bigger, &vec![1.0; bigger.len()]).unwrap();
        assert_eq!(e.p0, base.p0);
        assert_eq!(e.p1, base.p1);
    }
}
