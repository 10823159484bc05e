//! Discrepancy between observational and experimental estimates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::Interval;
use crate::error::{Error, Result};
use crate::estimators::EffectEstimate;

/// `100 (RR_m − RR_exp) / RR_exp`.
pub fn rr_percent_bias(rr_m: f64, rr_exp: f64) -> Result<f64> {
    if !(rr_exp > 0.0) {
        return Err(Error::UndefinedMetric(format!("experimental RR must be positive, got {rr_exp}")));
    }
    Ok(100.0 * (rr_m - rr_exp) / rr_exp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBias {
    pub value: f64,
    /// The observational δ is below the experimental one.
    pub underestimate: bool,
}

/// `100 (δ_m − δ_exp) / p0_exp`: the δ overestimate as a percentage of the
/// largest overestimate possible.
pub fn delta_percent_of_max(delta_m: f64, delta_exp: f64, p0_exp: f64) -> Result<DeltaBias> {
    if !(p0_exp > 0.0) {
        return Err(Error::UndefinedMetric(format!("experimental p0 must be positive, got {p0_exp}")));
    }
    Ok(DeltaBias { value: 100.0 * (delta_m - delta_exp) / p0_exp, underestimate: delta_m < delta_exp })
}

/// `100 (1 − (RR_m − RR_exp) / (RR_naive − RR_exp))`.
pub fn bias_reduction(rr_m: f64, rr_naive: f64, rr_exp: f64) -> Result<f64> {
    let naive_bias = rr_naive - rr_exp;
    if naive_bias == 0.0 || !naive_bias.is_finite() {
        return Err(Error::UndefinedMetric("naive estimator has zero bias".into()));
    }
    Ok(100.0 * (1.0 - (rr_m - rr_exp) / naive_bias))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub estimator: String,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub rr: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub delta: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub rr_abs_discrepancy: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub rr_percent_bias: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub delta_abs_discrepancy: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub delta_percent_of_max: f64,
    pub underestimate: bool,
    /// Absent when the naive estimator has no bias.
    pub bias_reduction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rr_percent_bias_ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_percent_of_max_ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_reduction_ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub rr_exp: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub delta_exp: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub p0_exp: f64,
    #[serde(deserialize_with = "crate::float_serde::nullable")]
    pub rr_naive: f64,
    pub rows: Vec<BiasRow>,
}

impl BiasRow {
    pub fn compute(m: &EffectEstimate, exp: &EffectEstimate, naive: &EffectEstimate) -> Result<BiasRow> {
        let d = delta_percent_of_max(m.delta(), exp.delta(), exp.p0)?;
        let reduction = match bias_reduction(m.rr(), naive.rr(), exp.rr()) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(BiasRow {
            estimator: m.estimator.clone(),
            rr: m.rr(),
            delta: m.delta(),
            rr_abs_discrepancy: (m.rr() - exp.rr()).abs(),
            rr_percent_bias: rr_percent_bias(m.rr(), exp.rr())?,
            delta_abs_discrepancy: (m.delta() - exp.delta()).abs(),
            delta_percent_of_max: d.value,
            underestimate: d.underestimate,
            bias_reduction: reduction,
            rr_percent_bias_ci: None,
            delta_percent_of_max_ci: None,
            bias_reduction_ci: None,
        })
    }
}

impl BiasReport {
    /// One row per estimate in `observational`, in the given order.
    pub fn new(exp: &EffectEstimate, naive: &EffectEstimate, observational: &[EffectEstimate]) -> Result<BiasReport> {
        let rows = observational.iter().map(|m| BiasRow::compute(m, exp, naive)).collect::<Result<Vec<_>>>()?;
        Ok(BiasReport { rr_exp: exp.rr(), delta_exp: exp.delta(), p0_exp: exp.p0, rr_naive: naive.rr(), rows })
    }

    pub fn row(&self, estimator: &str) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per estimator with point values and interval bounds.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "estimator",
            "rr",
            "delta",
            "rr_abs_discrepancy",
            "rr_percent_bias",
            "rr_percent_bias_low",
            "rr_percent_bias_high",
            "delta_abs_discrepancy",
            "delta_percent_of_max",
            "delta_percent_of_max_low",
            "delta_percent_of_max_high",
            "underestimate",
            "bias_reduction",
            "bias_reduction_low",
            "bias_reduction_high",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let lo = |i: &Option<Interval>| opt(i.as_ref().map(|i| i.low));
        let hi = |i: &Option<Interval>| opt(i.as_ref().map(|i| i.high));
        for r in &self.rows {
            w.write_record([
                r.estimator.clone(),
                r.rr.to_string(),
                r.delta.to_string(),
                r.rr_abs_discrepancy.to_string(),
                r.rr_percent_bias.to_string(),
                lo(&r.rr_percent_bias_ci),
                hi(&r.rr_percent_bias_ci),
                r.delta_abs_discrepancy.to_string(),
                r.delta_percent_of_max.to_string(),
                lo(&r.delta_percent_of_max_ci),
                hi(&r.delta_percent_of_max_ci),
                r.underestimate.to_string(),
                opt(r.bias_reduction),
                lo(&r.bias_reduction_ci),
                hi(&r.bias_reduction_ci),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
