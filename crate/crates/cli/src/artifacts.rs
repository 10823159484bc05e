//! On-disk report files and the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use peerstrat::{EffectEstimate, GroundTruth, Interval};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const ESTIMATES_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const ESTIMATES_JSON: &str = "estimates.json";
pub const ESTIMATES_CSV: &str = "estimates.csv";
pub const BIAS_JSON: &str = "bias_report.json";
pub const BIAS_CSV: &str = "bias_report.csv";
pub const DOMAINS_CSV: &str = "domains.csv";
pub const STRATA_CSV: &str = "strata.csv";
pub const SUBGROUPS_JSON: &str = "subgroups.json";
pub const SUBGROUPS_CSV: &str = "subgroups.csv";
pub const REPLICATES_CSV: &str = "replicates.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub p0: f64,
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub p1: f64,
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub rr: f64,
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub delta: f64,
}

impl Truth {
    pub fn of(g: &GroundTruth) -> Self {
        Truth { p0: g.p0, p1: g.p1, rr: g.rr, delta: g.delta }
    }

    pub fn from_rates(p0: f64, p1: f64) -> Self {
        Truth { p0, p1, rr: p1 / p0, delta: p1 - p0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub estimator: String,
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub p0: f64,
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub p1: f64,
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub rr: f64,
    #[serde(deserialize_with = "peerstrat::float_serde::nullable")]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0_ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p1_ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rr_ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_ci: Option<Interval>,
    /// Domains whose estimate is a fallback or excluded.
    #[serde(default)]
    pub flagged_domains: Vec<String>,
}

impl EstimateRow {
    pub fn of(e: &EffectEstimate) -> Self {
        EstimateRow {
            estimator: e.estimator.clone(),
            p0: e.p0,
            p1: e.p1,
            rr: e.rr(),
            delta: e.delta(),
            p0_ci: None,
            p1_ci: None,
            rr_ci: None,
            delta_ci: None,
            flagged_domains: e.flagged().map(|d| format!("{}:{}", d.domain_id, d.flag.as_str())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub dropped: usize,
    pub scheme: peerstrat::WeightScheme,
    pub variance: peerstrat::VarianceRule,
    pub interval: peerstrat::bootstrap::IntervalKind,
    pub refit_propensity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatesFile {
    pub format_version: u32,
    /// Model specs in configured order, then the experimental benchmark.
    pub rows: Vec<EstimateRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSummary>,
}

impl EstimatesFile {
    pub fn row(&self, estimator: &str) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["estimator".to_string()];
        for q in ["p0", "p1", "rr", "delta"] {
            header.extend([q.to_string(), format!("{q}_low"), format!("{q}_high")]);
        }
        header.push("flagged_domains".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.estimator.clone()];
            for (v, ci) in [(r.p0, &r.p0_ci), (r.p1, &r.p1_ci), (r.rr, &r.rr_ci), (r.delta, &r.delta_ci)] {
                rec.push(v.to_string());
                rec.push(ci.map(|i| i.low.to_string()).unwrap_or_default());
                rec.push(ci.map(|i| i.high.to_string()).unwrap_or_default());
            }
            rec.push(r.flagged_domains.len().to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub estimator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Relative to the experimental estimate within the same bucket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rr_percent_bias: Option<f64>,
    /// Why the estimate is missing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupBucket {
    pub bucket: usize,
    pub min_prior_sharers: u32,
    pub max_prior_sharers: u32,
    pub domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
    pub rows: Vec<SubgroupRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupsFile {
    pub requested: usize,
    pub buckets: Vec<SubgroupBucket>,
}

impl SubgroupsFile {
    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "bucket",
            "min_prior_sharers",
            "max_prior_sharers",
            "n_domains",
            "estimator",
            "p0",
            "p1",
            "rr",
            "delta",
            "rr_percent_bias",
            "true_rr",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.buckets {
            for r in &b.rows {
                w.write_record([
                    b.bucket.to_string(),
                    b.min_prior_sharers.to_string(),
                    b.max_prior_sharers.to_string(),
                    b.domains.len().to_string(),
                    r.estimator.clone(),
                    opt(r.p0),
                    opt(r.p1),
                    opt(r.rr),
                    opt(r.delta),
                    opt(r.rr_percent_bias),
                    opt(b.truth.map(|t| t.rr)),
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub bootstrap: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub formats: BTreeMap<String, u32>,
    pub command: String,
    /// SHA-256 of the canonical JSON config.
    pub config_hash: String,
    /// Equal for runs whose outputs may be combined by `report`: same data,
    /// seeds and model settings, possibly different spec lists.
    pub merge_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    pub seeds: Seeds,
    pub config: RunConfig,
    /// File name → SHA-256 of every other file written by the run.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, input_hash: Option<String>) -> Self {
        let mut formats = BTreeMap::new();
        formats.insert("estimates".to_string(), ESTIMATES_FORMAT_VERSION);
        formats.insert("propensity_fit".to_string(), peerstrat::ridge_logit::FIT_FORMAT_VERSION);
        let mut key_value = serde_json::to_value(config).expect("config serializes");
        if let Some(map) = key_value.as_object_mut() {
            for field in ["specs", "output", "threads", "log_level", "grand_naive", "dump_replicates"] {
                map.remove(field);
            }
            map.insert("input_hash".into(), serde_json::json!(input_hash));
        }
        Manifest {
            tool: "peerstrat".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            formats,
            command: command.into(),
            config_hash: sha256_hex(config.canonical_json().as_bytes()),
            merge_key: sha256_hex(serde_json::to_string(&key_value).expect("serializes").as_bytes()),
            input_hash,
            seeds: Seeds { bootstrap: config.bootstrap.seed, simulate: config.simulate.as_ref().map(|s| s.seed) },
            config: config.clone(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        read_json(&dir.join(MANIFEST))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join(MANIFEST), self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of several files, in order.
pub fn hash_files(paths: &[&Path]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Data(format!("missing artifact {}", path.display())),
        _ => CliError::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
