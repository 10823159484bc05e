//! Propensity-score strata and the stratified control rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which rows define the stratum boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantileBasis {
    /// Exposed and NECG rows together.
    #[default]
    Pooled,
    ExposedOnly,
}

/// Number of strata `J = clamp(round(scale · √n₁), min, max)`, or `fixed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrataPolicy {
    pub scale: f64,
    pub min: usize,
    pub max: usize,
    pub fixed: Option<usize>,
    pub basis: QuantileBasis,
}

impl Default for StrataPolicy {
    fn default() -> Self {
        StrataPolicy { scale: 1.0, min: 1, max: 500, fixed: None, basis: QuantileBasis::Pooled }
    }
}

impl StrataPolicy {
    pub fn fixed(j: usize) -> Self {
        StrataPolicy { fixed: Some(j), ..Self::default() }
    }

    /// Requested stratum count for an exposed weight of `n_exposed`.
    pub fn count(&self, n_exposed: f64) -> usize {
        if let Some(j) = self.fixed {
            return j.max(1);
        }
        let j = (self.scale * n_exposed.max(0.0).sqrt()).round();
        let j = if j.is_finite() { j as usize } else { self.max };
        j.clamp(self.min.max(1), self.max.max(1))
    }
}

/// Stratum index per row plus the boundaries that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataAssignment {
    pub stratum: Vec<u32>,
    pub n_strata: usize,
    pub requested: usize,
    /// Upper boundaries of all but the last stratum (right-closed intervals).
    pub cuts: Vec<f64>,
}

impl StrataAssignment {
    /// Every row in one stratum.
    pub fn single(n_rows: usize) -> Self {
        StrataAssignment { stratum: vec![0; n_rows], n_strata: 1, requested: 1, cuts: Vec::new() }
    }
}

/// Weighted type-1 quantiles: for `j = 1..parts`, the smallest value whose
/// cumulative weight reaches `j / parts` of the total. `pairs` must be sorted
/// by value; zero-weight entries are ignored. Duplicate cuts are removed.
pub fn weighted_quantile_cuts(pairs: &[(f64, f64)], parts: usize) -> Vec<f64> {
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut cuts = Vec::with_capacity(parts.saturating_sub(1));
    if parts < 2 || total <= 0.0 {
        return cuts;
    }
    let mut cum = 0.0;
    let mut j = 1;
    let mut i = 0;
    while i < pairs.len() && j < parts {
        // Whole tie group at once so that equal values never straddle a cut.
        let value = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == value {
            cum += pairs[i].1;
            i += 1;
        }
        while j < parts && cum * parts as f64 >= j as f64 * total {
            if cuts.last() != Some(&value) {
                cuts.push(value);
            }
            j += 1;
        }
    }
    cuts
}

/// Assigns rows to strata by score quantiles. `labels` marks exposed rows;
/// rows with zero weight are assigned but do not influence boundaries.
pub fn assign_strata(scores: &[f64], labels: &[bool], weights: &[f64], policy: &StrataPolicy) -> StrataAssignment {
    assert_eq!(scores.len(), labels.len());
    assert_eq!(scores.len(), weights.len());
    let n_exposed: f64 = labels.iter().zip(weights).filter(|(&l, _)| l).map(|(_, &w)| w).sum();
    let requested = policy.count(n_exposed);
    if requested <= 1 {
        return StrataAssignment::single(scores.len());
    }
    let mut pairs: Vec<(f64, f64)> = scores
        .iter()
        .zip(labels)
        .zip(weights)
        .filter(|((_, &l), &w)| w > 0.0 && (policy.basis == QuantileBasis::Pooled || l))
        .map(|((&s, _), &w)| (s, w))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cuts = weighted_quantile_cuts(&pairs, requested);
    // A cut at the maximum leaves an empty top stratum.
    if let (Some(&last), Some(&(max, _))) = (cuts.last(), pairs.last()) {
        if last >= max {
            cuts.pop();
        }
    }
    let raw: Vec<usize> = scores.iter().map(|&s| cuts.partition_point(|&q| q < s)).collect();

    // Compact strata that received no positive-weight rows.
    let mut used = vec![false; cuts.len() + 1];
    for (&k, &w) in raw.iter().zip(weights) {
        if w > 0.0 {
            used[k] = true;
        }
    }
    let kept: Vec<usize> = (0..used.len()).filter(|&k| used[k]).collect();
    if kept.len() <= 1 {
        return StrataAssignment { requested, ..StrataAssignment::single(scores.len()) };
    }
    // Zero-weight rows in an unused stratum join the next used one above it.
    let mut remap = vec![0u32; used.len()];
    for (k, slot) in remap.iter_mut().enumerate() {
        *slot = kept.partition_point(|&u| u < k).min(kept.len() - 1) as u32;
    }
    let kept_cuts: Vec<f64> = kept.windows(2).map(|w| cuts[w[1] - 1]).collect();
    let n_strata = kept.len();
    let stratum = raw.iter().map(|&k| remap[k]).collect();
    StrataAssignment { stratum, n_strata, requested, cuts: kept_cuts }
}

/// Per-stratum diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub n_exposed: f64,
    pub n_necg: f64,
    /// NECG outcome rate; `None` if the stratum has no NECG weight.
    pub p0: Option<f64>,
    pub p1_exposed: Option<f64>,
    pub exposed_share: f64,
    /// Stratum that absorbed this stratum's exposed weight, if any.
    pub merged_into: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainP0 {
    pub p0: f64,
    pub n_exposed: f64,
    pub n_necg: f64,
    pub requested: usize,
    pub strata: Vec<StratumSummary>,
    /// Number of strata whose exposed weight was reassigned.
    pub merged: usize,
}

/// Stratified control rate `Σ_j (n₁ⱼ / n₁) · p₀ⱼ` for one domain.
///
/// Rows are exposed (`labels[i]`) or NECG. A stratum with exposed weight but
/// no NECG weight passes its exposed weight to the nearest stratum that has
/// NECG weight; ties go to the lower index.
pub fn strata_p0(
    assignment: &StrataAssignment,
    scores: &[f64],
    labels: &[bool],
    outcomes: &[bool],
    weights: &[f64],
) -> Result<DomainP0> {
    let n = labels.len();
    assert_eq!(assignment.stratum.len(), n);
    assert_eq!(outcomes.len(), n);
    assert_eq!(weights.len(), n);
    assert_eq!(scores.len(), n);
    let k = assignment.n_strata;
    let mut n1 = vec![0.0; k];
    let mut y1 = vec![0.0; k];
    let mut n0 = vec![0.0; k];
    let mut y0 = vec![0.0; k];
    let mut lower = vec![f64::INFINITY; k];
    let mut upper = vec![f64::NEG_INFINITY; k];
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let s = assignment.stratum[i] as usize;
        lower[s] = lower[s].min(scores[i]);
        upper[s] = upper[s].max(scores[i]);
        let y = if outcomes[i] { w } else { 0.0 };
        if labels[i] {
            n1[s] += w;
            y1[s] += y;
        } else {
            n0[s] += w;
            y0[s] += y;
        }
    }
    let n1_total: f64 = n1.iter().sum();
    let n0_total: f64 = n0.iter().sum();
    if n1_total <= 0.0 {
        return Err(Error::NoExposed);
    }
    if n0_total <= 0.0 {
        return Err(Error::NoNecgInStrata);
    }

    let mut merged_into = vec![None; k];
    let mut effective = n1.clone();
    for s in 0..k {
        if n1[s] > 0.0 && n0[s] == 0.0 {
            let target = (1..k)
                .flat_map(|d| [s.checked_sub(d), Some(s + d)])
                .flatten()
                .find(|&t| t < k && n0[t] > 0.0)
                .expect("some stratum has NECG weight");
            effective[target] += n1[s];
            effective[s] = 0.0;
            merged_into[s] = Some(target);
        }
    }

    let mut p0 = 0.0;
    for s in 0..k {
        if effective[s] > 0.0 {
            p0 += (effective[s] / n1_total) * (y0[s] / n0[s]);
        }
    }
    let strata = (0..k)
        .map(|s| StratumSummary {
            index: s,
            lower: lower[s],
            upper: upper[s],
            n_exposed: n1[s],
            n_necg: n0[s],
            p0: (n0[s] > 0.0).then(|| y0[s] / n0[s]),
            p1_exposed: (n1[s] > 0.0).then(|| y1[s] / n1[s]),
            exposed_share: if n1[s] + n0[s] > 0.0 { n1[s] / (n1[s] + n0[s]) } else { 0.0 },
            merged_into: merged_into[s],
        })
        .collect();
    Ok(DomainP0 {
        p0,
        n_exposed: n1_total,
        n_necg: n0_total,
        requested: assignment.requested,
        strata,
        merged: merged_into.iter().filter(|m| m.is_some()).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn policy_count() {
        let p = StrataPolicy::default();
        assert_eq!(p.count(0.0), 1);
        assert_eq!(p.count(100.0), 10);
        assert_eq!(p.count(1e9), 500);
        assert_eq!(StrataPolicy { scale: 0.5, ..p.clone() }.count(100.0), 5);
        assert_eq!(StrataPolicy::fixed(3).count(1e6), 3);
    }

    #[test]
    fn constant_scores_collapse_to_one_stratum() {
        let scores = vec![0.3; 50];
        let labels: Vec<bool> = (0..50).map(|i| i % 2 == 0).collect();
        let a = assign_strata(&scores, &labels, &unit(50), &StrataPolicy::fixed(10));
        assert_eq!(a.n_strata, 1);
        assert!(a.stratum.iter().all(|&s| s == 0));
    }

    #[test]
    fn four_scores_two_strata() {
        let scores = [0.1, 0.2, 0.3, 0.4];
        let a = assign_strata(&scores, &[true, false, true, false], &unit(4), &StrataPolicy::fixed(2));
        assert_eq!(a.stratum, vec![0, 0, 1, 1]);
        assert_eq!(a.cuts, vec![0.2]);
    }

    #[test]
    fn uniform_scores_equal_counts() {
        let scores: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let labels: Vec<bool> = (0..1000).map(|i| i % 3 == 0).collect();
        let a = assign_strata(&scores, &labels, &unit(1000), &StrataPolicy::fixed(10));
        assert_eq!(a.n_strata, 10);
        let mut counts = vec![0; 10];
        for &s in &a.stratum {
            counts[s as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100), "{counts:?}");
    }

    #[test]
    fn empty_exposed_stratum_merges_into_neighbor() {
        // Rates 0.0 and 0.1; only the second stratum has NECG rows.
        let scores = [0.1, 0.1, 0.9, 0.9, 0.9];
        let labels = [true, true, true, false, false];
        let outcomes = [false, false, false, true, false];
        let a = StrataAssignment { stratum: vec![0, 0, 1, 1, 1], n_strata: 2, requested: 2, cuts: vec![0.1] };
        let r = strata_p0(&a, &scores, &labels, &outcomes, &unit(5)).unwrap();
        assert_eq!(r.p0, 0.5);
        assert_eq!(r.strata[0].merged_into, Some(1));
        assert_eq!(r.merged, 1);
    }

    #[test]
    fn degenerate_weights_example() {
        // Stratum rates 0.0 and 0.1 with exposed counts 0 and 10.
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut outcomes = Vec::new();
        let mut stratum = Vec::new();
        for i in 0..10 {
            scores.push(0.1);
            labels.push(false);
            outcomes.push(false);
            stratum.push(0);
            let _ = i;
        }
        for i in 0..10 {
            scores.push(0.9);
            labels.push(false);
            outcomes.push(i == 0);
            stratum.push(1);
        }
        for _ in 0..10 {
            scores.push(0.9);
            labels.push(true);
            outcomes.push(false);
            stratum.push(1);
        }
        let a = StrataAssignment { stratum, n_strata: 2, requested: 2, cuts: vec![0.1] };
        let r = strata_p0(&a, &scores, &labels, &outcomes, &unit(30)).unwrap();
        assert!((r.p0 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn no_necg_is_an_error() {
        let a = StrataAssignment::single(2);
        let e = strata_p0(&a, &[0.5, 0.5], &[true, true], &[false, true], &unit(2));
        assert!(matches!(e, Err(Error::NoNecgInStrata)));
    }

    #[test]
    fn ties_never_straddle_cuts() {
        let scores = [0.1, 0.2, 0.2, 0.2, 0.3, 0.4];
        let a = assign_strata(&scores, &[true; 6], &unit(6), &StrataPolicy::fixed(3));
        assert_eq!(a.stratum[1], a.stratum[2]);
        assert_eq!(a.stratum[2], a.stratum[3]);
    }

    /// Direct evaluation of the defining formula, without merging logic.
    fn brute_force_p0(stratum: &[u32], k: usize, labels: &[bool], outcomes: &[bool]) -> Option<f64> {
        let n1: f64 = labels.iter().filter(|&&l| l).count() as f64;
        let mut p0 = 0.0;
        for s in 0..k {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| stratum[i] as usize == s).collect();
            let mut e = 0.0;
            let mut c = 0.0;
            let mut y = 0.0;
            for &i in &rows {
                if labels[i] {
                    e += 1.0;
                } else {
                    c += 1.0;
                    if outcomes[i] {
                        y += 1.0;
                    }
                }
            }
            if e > 0.0 {
                if c == 0.0 {
                    return None;
                }
                p0 += (e / n1) * (y / c);
            }
        }
        Some(p0)
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<bool>, usize)> {
        (4usize..120).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(prop::bool::weighted(0.3), n),
                1usize..12,
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_when_no_merge((scores, labels, outcomes, j) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let w = unit(scores.len());
            let a = assign_strata(&scores, &labels, &w, &StrataPolicy::fixed(j));
            if let Some(expected) = brute_force_p0(&a.stratum, a.n_strata, &labels, &outcomes) {
                let r = strata_p0(&a, &scores, &labels, &outcomes, &w).unwrap();
                prop_assert_eq!(r.p0, expected);
                prop_assert_eq!(r.merged, 0);
            }
        }

        #[test]
        fn convex_combination((scores, labels, outcomes, j) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let w = unit(scores.len());
            let a = assign_strata(&scores, &labels, &w, &StrataPolicy::fixed(j));
            let r = strata_p0(&a, &scores, &labels, &outcomes, &w).unwrap();
            let rates: Vec<f64> = r.strata.iter().filter_map(|s| s.p0).collect();
            let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.p0 >= lo - 1e-12 && r.p0 <= hi + 1e-12);
        }

        #[test]
        fn invariant_under_monotone_transform((scores, labels, _o, j) in instance()) {
            let w = unit(scores.len());
            let a = assign_strata(&scores, &labels, &w, &StrataPolicy::fixed(j));
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let b = assign_strata(&t, &labels, &w, &StrataPolicy::fixed(j));
            prop_assert_eq!(a.stratum, b.stratum);
        }

        #[test]
        fn strata_are_ordered_by_score((scores, labels, _o, j) in instance()) {
            let w = unit(scores.len());
            let a = assign_strata(&scores, &labels, &w, &StrataPolicy::fixed(j));
            prop_assert!(a.n_strata <= j.max(1));
            for i in 0..scores.len() {
                for k in 0..scores.len() {
                    if scores[i] < scores[k] {
                        prop_assert!(a.stratum[i] <= a.stratum[k]);
                    }
                }
            }
        }

        #[test]
        fn integer_weights_equal_duplication((scores, labels, outcomes, j) in instance(), dup in 0usize..4) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            // Weight 2 on row 0 equals listing row 0 twice.
            let mut w = unit(scores.len());
            w[0] = 1.0 + dup as f64;
            let a = assign_strata(&scores, &labels, &w, &StrataPolicy::fixed(j));
            let mut s2 = scores.clone();
            let mut l2 = labels.clone();
            let mut o2 = outcomes.clone();
            for _ in 0..dup {
                s2.push(scores[0]);
                l2.push(labels[0]);
                o2.push(outcomes[0]);
            }
            let u2 = unit(s2.len());
            let b = assign_strata(&s2, &l2, &u2, &StrataPolicy::fixed(j));
            prop_assert_eq!(&a.stratum[..], &b.stratum[..scores.len()]);
            let ra = strata_p0(&a, &scores, &labels, &outcomes, &w).unwrap();
            let rb = strata_p0(&b, &s2, &l2, &o2, &u2).unwrap();
            prop_assert!((ra.p0 - rb.p0).abs() < 1e-12);
        }
    }
}
