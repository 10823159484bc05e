//! Per-domain sparse design matrices built from a [`ModelSpec`].
//!
//! Column blocks:
//!
//! | block | columns |
//! |-------|---------|
//! | `D`   | age, age², gender (2 indicators, female is the reference level) |
//! | `A`   | `D` plus 15 activity, communication and link-sharing columns |
//! | `s`   | log(x+1) and 1{x>0} of prior shares in the focal domain |
//! | `M`   | log(x+1) of prior shares in every other domain of the vocabulary |
//! | `O`   | the simulator's true confounding index (oracle diagnostics only) |
//!
//! Only exposed and NECG rows enter a design; experimental-control rows are
//! never part of the observational analysis.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_model::{Arm, Dataset, DenseField, UserFeatures};
use crate::error::{Error, Result};
use crate::ridge_logit::PenaltyScale;
use crate::stratify::StrataPolicy;

/// Covariate block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Demographics,
    All,
    SameDomain,
    OtherDomains,
    Oracle,
}

/// Named covariate-set composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecName {
    Naive,
    D,
    A,
    Ds,
    As,
    M,
    Ms,
    AM,
    AMs,
    /// Adjusts for the generator's true confounder; requires simulated data.
    Oracle,
}

impl SpecName {
    /// The nine compositions evaluated by default, most to least adjusted.
    pub const STANDARD: [SpecName; 9] = [
        SpecName::AMs,
        SpecName::Ms,
        SpecName::AM,
        SpecName::M,
        SpecName::As,
        SpecName::Ds,
        SpecName::A,
        SpecName::D,
        SpecName::Naive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SpecName::Naive => "naive",
            SpecName::D => "D",
            SpecName::A => "A",
            SpecName::Ds => "Ds",
            SpecName::As => "As",
            SpecName::M => "M",
            SpecName::Ms => "Ms",
            SpecName::AM => "AM",
            SpecName::AMs => "AMs",
            SpecName::Oracle => "oracle",
        }
    }

    pub fn blocks(self) -> &'static [Block] {
        use Block::*;
        match self {
            SpecName::Naive => &[],
            SpecName::D => &[Demographics],
            SpecName::A => &[All],
            SpecName::Ds => &[Demographics, SameDomain],
            SpecName::As => &[All, SameDomain],
            SpecName::M => &[OtherDomains],
            SpecName::Ms => &[SameDomain, OtherDomains],
            SpecName::AM => &[All, OtherDomains],
            SpecName::AMs => &[All, SameDomain, OtherDomains],
            SpecName::Oracle => &[Oracle],
        }
    }

    pub fn needs_prior_shares(self) -> bool {
        self.blocks().iter().any(|b| matches!(b, Block::SameDomain | Block::OtherDomains))
    }
}

impl fmt::Display for SpecName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpecName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SpecName::Naive,
            SpecName::D,
            SpecName::A,
            SpecName::Ds,
            SpecName::As,
            SpecName::M,
            SpecName::Ms,
            SpecName::AM,
            SpecName::AMs,
            SpecName::Oracle,
        ]
        .into_iter()
        .find(|n| n.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown model spec {s:?}")))
    }
}

impl Serialize for SpecName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SpecName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A covariate composition plus the fitting and stratification settings used with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: SpecName,
    pub penalty: f64,
    pub penalty_scale: PenaltyScale,
    pub strata: StrataPolicy,
    pub standardize: bool,
    pub missing_indicators: bool,
}

impl ModelSpec {
    pub fn new(name: SpecName) -> Self {
        ModelSpec {
            name,
            penalty: 0.5,
            penalty_scale: PenaltyScale::Total,
            strata: StrataPolicy::default(),
            standardize: true,
            missing_indicators: false,
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn with_strata(mut self, strata: StrataPolicy) -> Self {
        self.strata = strata;
        self
    }

    pub fn blocks(&self) -> &'static [Block] {
        self.name.blocks()
    }
}

/// Column centering and scaling applied on top of the raw sparse values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Zero-variance columns removed from the design.
    pub dropped: Vec<String>,
}

/// Sparse (CSR) design for one domain. When `scaling` is set, the logical
/// value of entry (r, c) is `(raw(r, c) - means[c]) / scales[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub domain: u32,
    columns: Vec<String>,
    rows: Vec<u32>,
    labels: Vec<bool>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    scaling: Option<ScalingRecord>,
}

impl DesignMatrix {
    /// Builds a design from dense rows; zeros are not stored.
    pub fn from_dense(columns: Vec<String>, labels: Vec<bool>, dense: &[Vec<f64>]) -> Self {
        assert_eq!(labels.len(), dense.len());
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in dense {
            assert_eq!(row.len(), columns.len());
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(c as u32);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        DesignMatrix {
            domain: 0,
            columns,
            rows: (0..dense.len() as u32).collect(),
            labels,
            indptr,
            indices,
            values,
            scaling: None,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column_dictionary(&self) -> BTreeMap<String, usize> {
        self.columns.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect()
    }

    /// Observation indices (into the dataset) of the design rows.
    pub fn observation_rows(&self) -> &[u32] {
        &self.rows
    }

    /// Exposure indicator per row (exposed = true, NECG = false).
    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn scaling(&self) -> Option<&ScalingRecord> {
        self.scaling.as_ref()
    }

    /// Raw stored entries of row `r`.
    pub fn raw_row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    fn mean_scale(&self, c: usize) -> (f64, f64) {
        match &self.scaling {
            Some(s) => (s.means[c], s.scales[c]),
            None => (0.0, 1.0),
        }
    }

    /// Logical (scaled) values as a dense row-major matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let p = self.n_cols();
        (0..self.n_rows())
            .map(|r| {
                let mut raw = vec![0.0; p];
                let (idx, val) = self.raw_row(r);
                for (&c, &v) in idx.iter().zip(val) {
                    raw[c as usize] = v;
                }
                raw.iter()
                    .enumerate()
                    .map(|(c, &x)| {
                        let (m, s) = self.mean_scale(c);
                        (x - m) / s
                    })
                    .collect()
            })
            .collect()
    }

    /// `X β` on logical values.
    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.n_cols());
        let (scaled, offset) = self.fold_scaling(beta);
        (0..self.n_rows())
            .map(|r| {
                let (idx, val) = self.raw_row(r);
                let mut acc = offset;
                for (&c, &v) in idx.iter().zip(val) {
                    acc += v * scaled[c as usize];
                }
                acc
            })
            .collect()
    }

    /// `Xᵀ v` on logical values.
    pub fn tmul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_rows());
        let mut out = vec![0.0; self.n_cols()];
        let mut total = 0.0;
        for (r, &vr) in v.iter().enumerate() {
            total += vr;
            if vr == 0.0 {
                continue;
            }
            let (idx, val) = self.raw_row(r);
            for (&c, &x) in idx.iter().zip(val) {
                out[c as usize] += x * vr;
            }
        }
        if let Some(s) = &self.scaling {
            for (c, o) in out.iter_mut().enumerate() {
                *o = (*o - s.means[c] * total) / s.scales[c];
            }
        }
        out
    }

    /// Returns `(β / σ, -Σ μ β / σ)`.
    pub(crate) fn fold_scaling(&self, beta: &[f64]) -> (Vec<f64>, f64) {
        match &self.scaling {
            None => (beta.to_vec(), 0.0),
            Some(s) => {
                let scaled: Vec<f64> = beta.iter().zip(&s.scales).map(|(b, sc)| b / sc).collect();
                let offset = -scaled.iter().zip(&s.means).map(|(b, m)| b * m).sum::<f64>();
                (scaled, offset)
            }
        }
    }

    /// Returns a design with the same rows and a replaced scaling record.
    pub fn with_scaling(&self, scaling: Option<ScalingRecord>) -> Self {
        DesignMatrix { scaling, ..self.clone() }
    }
}

/// Centers and scales every column to unit variance over the design rows.
pub fn standardize(design: &DesignMatrix) -> (DesignMatrix, ScalingRecord) {
    standardize_weighted(design, &vec![1.0; design.n_rows()])
}

/// Weighted variant of [`standardize`]; rows with zero weight do not
/// contribute to the moments. Variances use the population convention.
pub fn standardize_weighted(design: &DesignMatrix, weights: &[f64]) -> (DesignMatrix, ScalingRecord) {
    assert_eq!(weights.len(), design.n_rows());
    let p = design.n_cols();
    let total_w: f64 = weights.iter().sum();
    let positive_rows = weights.iter().filter(|&&w| w > 0.0).count();

    // Moments of the current logical values: logical = (raw - m0) / s0.
    let mut sum_w_raw = vec![0.0; p];
    let mut nz_w = vec![0.0; p];
    let mut nz_positive = vec![0usize; p];
    let mut min = vec![f64::INFINITY; p];
    let mut max = vec![f64::NEG_INFINITY; p];
    for (r, &w) in weights.iter().enumerate() {
        let (idx, val) = design.raw_row(r);
        for (&c, &x) in idx.iter().zip(val) {
            let c = c as usize;
            sum_w_raw[c] += w * x;
            nz_w[c] += w;
            if w > 0.0 {
                nz_positive[c] += 1;
                min[c] = min[c].min(x);
                max[c] = max[c].max(x);
            }
        }
    }
    let mut raw_mean = vec![0.0; p];
    let mut constant = vec![false; p];
    for c in 0..p {
        if nz_positive[c] < positive_rows {
            min[c] = min[c].min(0.0);
            max[c] = max[c].max(0.0);
        }
        constant[c] = positive_rows == 0 || min[c] == max[c];
        raw_mean[c] = if total_w > 0.0 { sum_w_raw[c] / total_w } else { 0.0 };
    }
    let mut ss = vec![0.0; p];
    for (r, &w) in weights.iter().enumerate() {
        let (idx, val) = design.raw_row(r);
        for (&c, &x) in idx.iter().zip(val) {
            let d = x - raw_mean[c as usize];
            ss[c as usize] += w * d * d;
        }
    }

    let mut keep = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    let mut dropped = Vec::new();
    for c in 0..p {
        if constant[c] {
            dropped.push(design.columns[c].clone());
            continue;
        }
        let var = (ss[c] + (total_w - nz_w[c]) * raw_mean[c] * raw_mean[c]) / total_w;
        let sd = var.sqrt();
        // Compose with any existing scaling so logical values are standardized.
        let (m0, s0) = design.mean_scale(c);
        let mean_logical = (raw_mean[c] - m0) / s0;
        let sd_logical = sd / s0;
        keep.push(c);
        means.push(m0 + s0 * mean_logical);
        scales.push(s0 * sd_logical);
    }
    if let Some(prev) = &design.scaling {
        let mut all = prev.dropped.clone();
        all.extend(dropped);
        dropped = all;
    }

    let mut remap = vec![u32::MAX; p];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new as u32;
    }
    let mut indptr = vec![0];
    let mut indices = Vec::with_capacity(design.nnz());
    let mut values = Vec::with_capacity(design.nnz());
    for r in 0..design.n_rows() {
        let (idx, val) = design.raw_row(r);
        for (&c, &x) in idx.iter().zip(val) {
            let nc = remap[c as usize];
            if nc != u32::MAX {
                indices.push(nc);
                values.push(x);
            }
        }
        indptr.push(indices.len());
    }
    let record = ScalingRecord { means, scales, dropped };
    let out = DesignMatrix {
        domain: design.domain,
        columns: keep.iter().map(|&c| design.columns[c].clone()).collect(),
        rows: design.rows.clone(),
        labels: design.labels.clone(),
        indptr,
        indices,
        values,
        scaling: Some(record.clone()),
    };
    (out, record)
}

const D_COLUMNS: [&str; 4] = ["age", "age_sq", "gender_male", "gender_unknown"];
const A_EXTRA_COLUMNS: [&str; 15] = [
    "friend_count",
    "friends_initiated",
    "friend_initiation_prop",
    "log_tenure",
    "profile_picture",
    "days_active_30",
    "days_active_91",
    "days_active_182",
    "log_actions",
    "log_posts",
    "log_comments",
    "log_likes",
    "log_shares",
    "any_shares",
    "log_unique_domains",
];
const D_FIELDS: [DenseField; 2] = [DenseField::Age, DenseField::Gender];

fn value_or_zero(f: &UserFeatures, field: DenseField) -> f64 {
    f.get(field).unwrap_or(0.0)
}

fn push_nz(out: &mut Vec<(u32, f64)>, col: usize, v: f64) {
    if v != 0.0 {
        out.push((col as u32, v));
    }
}

fn demographic_values(f: &UserFeatures, base: usize, out: &mut Vec<(u32, f64)>) {
    let age = value_or_zero(f, DenseField::Age);
    push_nz(out, base, age);
    push_nz(out, base + 1, age * age);
    let gender = value_or_zero(f, DenseField::Gender);
    push_nz(out, base + 2, f64::from(u8::from(gender == 1.0)));
    push_nz(out, base + 3, f64::from(u8::from(gender == 2.0)));
}

fn activity_values(f: &UserFeatures, base: usize, out: &mut Vec<(u32, f64)>) {
    use DenseField::*;
    let friends = value_or_zero(f, FriendCount);
    let initiated = value_or_zero(f, FriendsInitiated);
    let shares = value_or_zero(f, Shares1m);
    let vals = [
        friends,
        initiated,
        if friends > 0.0 { initiated / friends } else { 0.0 },
        value_or_zero(f, TenureDays).ln_1p(),
        value_or_zero(f, ProfilePicture),
        value_or_zero(f, DaysActive30),
        value_or_zero(f, DaysActive91),
        value_or_zero(f, DaysActive182),
        value_or_zero(f, ActionCount).ln_1p(),
        value_or_zero(f, PostCount).ln_1p(),
        value_or_zero(f, CommentCount).ln_1p(),
        value_or_zero(f, LikeCount).ln_1p(),
        shares.ln_1p(),
        f64::from(u8::from(shares > 0.0)),
        value_or_zero(f, UniqueDomains6m).ln_1p(),
    ];
    for (i, v) in vals.into_iter().enumerate() {
        push_nz(out, base + i, v);
    }
}

/// Builds the design for one domain. Rows are the domain's exposed and NECG
/// observations in table order.
pub fn build_design(dataset: &Dataset, domain: u32, spec: &ModelSpec) -> Result<DesignMatrix> {
    let blocks = spec.blocks();
    if blocks.is_empty() {
        return Err(Error::InvalidArgument(format!("spec {} has no covariate blocks", spec.name)));
    }
    let domain_id = dataset.domain_id(domain).to_string();
    let obs = dataset.observations();
    let rows: Vec<u32> = dataset
        .domain_rows(domain)
        .iter()
        .copied()
        .filter(|&r| obs[r as usize].arm != Arm::ExperimentalControl)
        .collect();
    let n_exposed = rows.iter().filter(|&&r| obs[r as usize].arm == Arm::Exposed).count();
    if n_exposed == 0 || n_exposed == rows.len() {
        return Err(Error::EmptyDomain(domain_id));
    }
    let needs_prior = blocks.iter().any(|b| matches!(b, Block::SameDomain | Block::OtherDomains));
    if needs_prior && !dataset.features().has_prior_shares {
        return Err(Error::MissingPriorShares(spec.name.to_string()));
    }
    if blocks.contains(&Block::Oracle) && rows.iter().any(|&r| obs[r as usize].confounder.is_none()) {
        return Err(Error::MissingConfounder(spec.name.to_string()));
    }

    // Column layout.
    let mut columns: Vec<String> = Vec::new();
    let mut dense_fields: Vec<DenseField> = Vec::new();
    let mut layout: Vec<(Block, usize)> = Vec::new();
    for &block in blocks {
        layout.push((block, columns.len()));
        match block {
            Block::Demographics => {
                columns.extend(D_COLUMNS.iter().map(|s| s.to_string()));
                dense_fields.extend(D_FIELDS);
            }
            Block::All => {
                columns.extend(D_COLUMNS.iter().chain(&A_EXTRA_COLUMNS).map(|s| s.to_string()));
                dense_fields.extend(DenseField::ALL);
            }
            Block::SameDomain => {
                columns.push("log_same_domain_shares".into());
                columns.push("any_same_domain_shares".into());
            }
            Block::OtherDomains => {
                for d in 0..dataset.n_domains() as u32 {
                    if d != domain {
                        columns.push(format!("other:{}", dataset.domain_id(d)));
                    }
                }
            }
            Block::Oracle => columns.push("oracle_confounder".into()),
        }
    }
    let missing_base = columns.len();
    if spec.missing_indicators {
        columns.extend(dense_fields.iter().map(|f| format!("missing:{}", f.name())));
    }

    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    let mut entries: Vec<(u32, f64)> = Vec::new();
    for (r, &o) in rows.iter().enumerate() {
        let ob = &obs[o as usize];
        let f = dataset.user_features(ob.user);
        labels.push(ob.arm == Arm::Exposed);
        entries.clear();
        for &(block, base) in &layout {
            match block {
                Block::Demographics => demographic_values(f, base, &mut entries),
                Block::All => {
                    demographic_values(f, base, &mut entries);
                    activity_values(f, base + D_COLUMNS.len(), &mut entries);
                }
                Block::SameDomain => {
                    let same = f64::from(f.prior_share_count(domain));
                    push_nz(&mut entries, base, same.ln_1p());
                    push_nz(&mut entries, base + 1, f64::from(u8::from(same > 0.0)));
                }
                Block::OtherDomains => {
                    for &(d, c) in &f.prior_shares {
                        if d == domain {
                            continue;
                        }
                        let col = base + if d < domain { d as usize } else { d as usize - 1 };
                        push_nz(&mut entries, col, f64::from(c).ln_1p());
                    }
                }
                Block::Oracle => push_nz(&mut entries, base, ob.confounder.unwrap_or(0.0)),
            }
        }
        if spec.missing_indicators {
            for (i, &field) in dense_fields.iter().enumerate() {
                push_nz(&mut entries, missing_base + i, f64::from(u8::from(f.get(field).is_none())));
            }
        }
        for &(c, v) in &entries {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: r, column: c as usize });
            }
            indices.push(c);
            values.push(v);
        }
        indptr.push(indices.len());
    }

    Ok(DesignMatrix { domain, columns, rows, labels, indptr, indices, values, scaling: None })
}
