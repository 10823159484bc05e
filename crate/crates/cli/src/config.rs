//! Run configuration: defaults, then command-line flags, then a config file.

use std::path::{Path, PathBuf};

use peerstrat::featurize::ModelSpec;
use peerstrat::stratify::StrataPolicy;
use peerstrat::{BootstrapConfig, Format, PenaltyScale, SimConfig, SpecName};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    /// Ground-truth sidecar for an ingested simulator dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    /// Generate the dataset instead of reading `input`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimConfig>,
    pub specs: Vec<SpecName>,
    pub penalty: f64,
    pub penalty_scale: PenaltyScale,
    pub strata: StrataPolicy,
    pub standardize: bool,
    pub missing_indicators: bool,
    /// `replicates = 0` disables the bootstrap.
    pub bootstrap: BootstrapConfig,
    pub output: PathBuf,
    /// Prior-popularity subgroups; 0 disables the subgroup table.
    pub subgroups: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub log_level: String,
    pub grand_naive: bool,
    pub dump_replicates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            schema: None,
            format: None,
            ground_truth: None,
            simulate: None,
            specs: SpecName::STANDARD.to_vec(),
            penalty: 0.5,
            penalty_scale: PenaltyScale::Total,
            strata: StrataPolicy::default(),
            standardize: true,
            missing_indicators: false,
            bootstrap: BootstrapConfig::default(),
            output: PathBuf::from("out"),
            subgroups: 5,
            threads: None,
            log_level: "info".into(),
            grand_naive: false,
            dump_replicates: false,
        }
    }
}

impl RunConfig {
    pub fn model_spec(&self, name: SpecName) -> ModelSpec {
        ModelSpec {
            name,
            penalty: self.penalty,
            penalty_scale: self.penalty_scale,
            strata: self.strata.clone(),
            standardize: self.standardize,
            missing_indicators: self.missing_indicators,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.specs.is_empty() {
            return Err(CliError::Usage("at least one model spec is required".into()));
        }
        let mut seen = self.specs.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.specs.len() {
            return Err(CliError::Usage("model specs must not repeat".into()));
        }
        if !self.penalty.is_finite() || self.penalty < 0.0 {
            return Err(CliError::Usage(format!("penalty must be finite and nonnegative, got {}", self.penalty)));
        }
        if self.bootstrap.replicates != 0 {
            self.bootstrap.validate()?;
        }
        if self.subgroups == 1 {
            return Err(CliError::Usage("subgroups must be 0 (off) or at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("threads must be positive".into()));
        }
        match (&self.input, &self.simulate) {
            (None, None) => Err(CliError::Usage("either input or simulate must be set".into())),
            (Some(_), Some(_)) => Err(CliError::Usage("input and simulate are mutually exclusive".into())),
            _ => Ok(()),
        }
    }

    /// Canonical JSON: keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

/// Overlays `top` onto `base`, recursing into tables.
pub fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn json_to_toml(value: serde_json::Value) -> Option<toml::Value> {
    use serde_json::Value as J;
    Some(match value {
        J::Null => return None,
        J::Bool(b) => toml::Value::Boolean(b),
        J::Number(n) => match n.as_i64() {
            Some(i) => toml::Value::Integer(i),
            None => toml::Value::Float(n.as_f64()?),
        },
        J::String(s) => toml::Value::String(s),
        J::Array(a) => toml::Value::Array(a.into_iter().filter_map(json_to_toml).collect()),
        J::Object(o) => toml::Value::Table(o.into_iter().filter_map(|(k, v)| Some((k, json_to_toml(v)?))).collect()),
    })
}

/// Reads a TOML config, or a JSON run manifest whose `config` field is used.
pub fn load_config_file(path: &Path) -> Result<toml::Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let config = json.get("config").cloned().unwrap_or(json);
        json_to_toml(config).ok_or_else(|| CliError::Usage(format!("{}: empty config", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Resolves `defaults ← flags ← file`.
pub fn resolve(flags: toml::Value, file: Option<toml::Value>) -> Result<RunConfig, CliError> {
    let mut value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    merge(&mut value, flags);
    if let Some(file) = file {
        merge(&mut value, file);
    }
    let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> toml::Value {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn file_overrides_flags_overrides_defaults() {
        let flags = table("input = 'a.csv'\npenalty = 5.0\nsubgroups = 3");
        let file = table("penalty = 50.0\n[bootstrap]\nreplicates = 20");
        let c = resolve(flags, Some(file)).unwrap();
        assert_eq!(c.penalty, 50.0);
        assert_eq!(c.subgroups, 3);
        assert_eq!(c.bootstrap.replicates, 20);
        assert_eq!(c.bootstrap.seed, 0);
        assert_eq!(c.specs.len(), 9);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = resolve(table("input = 'a.csv'\npenalt = 1.0"), None).unwrap_err();
        assert!(err.to_string().contains("penalt"), "{err}");
    }

    #[test]
    fn manifest_config_round_trips() {
        let mut c = RunConfig { input: Some("x.ndjson".into()), ..RunConfig::default() };
        c.specs = vec![SpecName::Naive, SpecName::D];
        let manifest = serde_json::json!({ "tool": "peerstrat", "config": serde_json::to_value(&c).unwrap() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, manifest.to_string()).unwrap();
        let back = resolve(toml::Value::Table(Default::default()), Some(load_config_file(&path).unwrap())).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_json(), c.canonical_json());
    }

    #[test]
    fn source_is_required() {
        assert!(matches!(resolve(table(""), None), Err(CliError::Usage(_))));
    }
}
