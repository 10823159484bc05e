//! Loading data and running the estimators, bootstrap and subgroup table.

use std::path::{Path, PathBuf};

use peerstrat::bias_metrics::{bias_reduction, delta_percent_of_max, rr_percent_bias};
use peerstrat::data_model::validate_arms;
use peerstrat::estimators::{estimate_grand_naive, popularity_buckets};
use peerstrat::simulator::load_ground_truth;
use peerstrat::{
    bootstrap_ci, emit, estimate_experimental, estimate_naive, generate, ingest, AdjustedPipeline, BiasReport,
    BootstrapResult, Dataset, EffectEstimate, Format, Schema, ScoreMode, SpecName,
};

use crate::artifacts::{
    hash_files, BootstrapSummary, EstimateRow, EstimatesFile, SubgroupBucket, SubgroupRow, SubgroupsFile, Truth,
    ESTIMATES_FORMAT_VERSION,
};
use crate::config::RunConfig;
use crate::error::CliError;

pub struct Loaded {
    pub dataset: Dataset,
    pub input_hash: Option<String>,
}

pub fn input_format(config: &RunConfig, input: &Path) -> Result<Format, CliError> {
    config
        .format
        .or_else(|| Format::from_path(input))
        .ok_or_else(|| CliError::Usage(format!("cannot infer the format of {}; pass --format", input.display())))
}

/// Reads `input`, or simulates. With `emit_dir`, simulated data is also
/// written there and hashed.
pub fn load(config: &RunConfig, emit_dir: Option<&Path>) -> Result<Loaded, CliError> {
    if let Some(sim) = &config.simulate {
        let dataset = generate(sim)?;
        let input_hash = match emit_dir {
            Some(dir) => {
                let files = emit(&dataset, dir, config.format.unwrap_or(Format::Ndjson))?;
                let mut paths: Vec<&Path> = vec![&files.observations, &files.users, &files.schema];
                if let Some(t) = &files.ground_truth {
                    paths.push(t);
                }
                Some(hash_files(&paths)?)
            }
            None => None,
        };
        return Ok(Loaded { dataset, input_hash });
    }
    let input = config.input.as_ref().ok_or_else(|| CliError::Usage("no input".into()))?;
    let format = input_format(config, input)?;
    let schema = match &config.schema {
        Some(p) => Schema::load(p)?,
        None => Schema::default(),
    };
    let mut dataset = ingest(input, format, &schema)?;
    let mut paths: Vec<PathBuf> = vec![input.clone()];
    if let Some(p) = &config.schema {
        paths.push(p.clone());
    }
    if let Some(u) = &schema.users_file {
        paths.push(input.parent().unwrap_or(Path::new(".")).join(u));
    }
    if let Some(t) = &config.ground_truth {
        dataset.set_ground_truth(Some(load_ground_truth(t)?));
        paths.push(t.clone());
    }
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    Ok(Loaded { dataset, input_hash: Some(hash_files(&refs)?) })
}

enum Slot<'a> {
    Experimental,
    Naive,
    GrandNaive,
    Adjusted(Box<AdjustedPipeline<'a>>),
}

/// Every configured estimator, set up once and rerun under any weights.
struct Suite<'a> {
    dataset: &'a Dataset,
    slots: Vec<Slot<'a>>,
    /// Slots reported as rows; a trailing naive slot may be hidden.
    visible: usize,
    exp: usize,
    naive: usize,
    mode: ScoreMode,
}

impl<'a> Suite<'a> {
    fn new(dataset: &'a Dataset, config: &RunConfig) -> Result<Self, CliError> {
        let mut slots = Vec::new();
        for &name in &config.specs {
            if name == SpecName::Naive {
                slots.push(Slot::Naive);
            } else {
                log::info!("building designs for {name}");
                let mut p = AdjustedPipeline::new(dataset, &config.model_spec(name))?;
                if !config.bootstrap.refit_propensity {
                    p.cache_point_scores()?;
                }
                slots.push(Slot::Adjusted(Box::new(p)));
            }
        }
        if config.grand_naive {
            slots.push(Slot::GrandNaive);
        }
        let exp = slots.len();
        slots.push(Slot::Experimental);
        let visible = slots.len();
        let naive = match slots.iter().position(|s| matches!(s, Slot::Naive)) {
            Some(i) => i,
            None => {
                slots.push(Slot::Naive);
                visible
            }
        };
        let mode = if config.bootstrap.refit_propensity { ScoreMode::Refit } else { ScoreMode::Fixed };
        Ok(Suite { dataset, slots, visible, exp, naive, mode })
    }

    fn run_slot(&self, slot: &Slot<'_>, weights: &[f64], mode: ScoreMode) -> peerstrat::Result<EffectEstimate> {
        match slot {
            Slot::Experimental => estimate_experimental(self.dataset, weights),
            Slot::Naive => estimate_naive(self.dataset, weights),
            Slot::GrandNaive => estimate_grand_naive(self.dataset, weights),
            Slot::Adjusted(p) => p.estimate(weights, mode),
        }
    }

    fn run(&self, weights: &[f64], mode: ScoreMode) -> peerstrat::Result<Vec<EffectEstimate>> {
        self.slots.iter().map(|s| self.run_slot(s, weights, mode)).collect()
    }

    fn observational(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.visible).filter(move |&i| i != self.exp)
    }

    fn statistic_names(&self, labels: &[String]) -> Vec<String> {
        let mut names = Vec::new();
        for label in &labels[..self.visible] {
            for q in ["p0", "p1", "rr", "delta"] {
                names.push(format!("{label}.{q}"));
            }
        }
        for i in self.observational() {
            for q in ["rr_percent_bias", "delta_percent_of_max", "bias_reduction"] {
                names.push(format!("{}.{q}", labels[i]));
            }
        }
        names
    }

    fn statistics(&self, estimates: &[EffectEstimate]) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &estimates[..self.visible] {
            out.extend([e.p0, e.p1, e.rr(), e.delta()]);
        }
        let (exp, naive) = (&estimates[self.exp], &estimates[self.naive]);
        for i in self.observational() {
            let m = &estimates[i];
            out.push(rr_percent_bias(m.rr(), exp.rr()).unwrap_or(f64::NAN));
            out.push(delta_percent_of_max(m.delta(), exp.delta(), exp.p0).map(|d| d.value).unwrap_or(f64::NAN));
            out.push(bias_reduction(m.rr(), naive.rr(), exp.rr()).unwrap_or(f64::NAN));
        }
        out
    }
}

pub struct EstimateOutcome {
    /// Rows of the estimates table, with per-domain detail.
    pub estimates: Vec<EffectEstimate>,
    pub table: EstimatesFile,
    pub bias: BiasReport,
    pub bootstrap: Option<BootstrapResult>,
    pub subgroups: Option<SubgroupsFile>,
}

pub fn estimate(dataset: &Dataset, config: &RunConfig) -> Result<EstimateOutcome, CliError> {
    for &name in &config.specs {
        if name.needs_prior_shares() && !dataset.features().has_prior_shares {
            return Err(peerstrat::Error::MissingPriorShares(name.to_string()).into());
        }
    }
    let arms = validate_arms(dataset);
    for d in arms.zero_weight_domains() {
        log::warn!("domain {d} has no exposed pairs and carries zero weight");
    }
    let suite = Suite::new(dataset, config)?;
    let ones = vec![1.0; dataset.len()];
    let all = suite.run(&ones, ScoreMode::Refit)?;
    let labels: Vec<String> = all.iter().map(|e| e.estimator.clone()).collect();
    for e in &all[..suite.visible] {
        for d in e.flagged() {
            log::warn!("{}: domain {} flagged {}", e.estimator, d.domain_id, d.flag.as_str());
        }
    }

    let observational: Vec<EffectEstimate> = suite.observational().map(|i| all[i].clone()).collect();
    let mut bias = BiasReport::new(&all[suite.exp], &all[suite.naive], &observational)?;
    let mut rows: Vec<EstimateRow> = all[..suite.visible].iter().map(EstimateRow::of).collect();

    let bootstrap = if config.bootstrap.replicates > 0 {
        let names = suite.statistic_names(&labels);
        log::info!("bootstrap: {} replicates, {} statistics", config.bootstrap.replicates, names.len());
        let result = bootstrap_ci(dataset, &config.bootstrap, &names, |w| {
            let est = suite.run(w, suite.mode)?;
            Ok(suite.statistics(&est))
        })?;
        for row in rows.iter_mut() {
            let get = |q: &str| result.interval(&format!("{}.{q}", row.estimator)).copied();
            row.p0_ci = get("p0");
            row.p1_ci = get("p1");
            row.rr_ci = get("rr");
            row.delta_ci = get("delta");
        }
        for row in bias.rows.iter_mut() {
            let get = |q: &str| result.interval(&format!("{}.{q}", row.estimator)).copied().filter(|i| i.point.is_finite());
            row.rr_percent_bias_ci = get("rr_percent_bias");
            row.delta_percent_of_max_ci = get("delta_percent_of_max");
            row.bias_reduction_ci = get("bias_reduction");
        }
        Some(result)
    } else {
        None
    };

    let table = EstimatesFile {
        format_version: ESTIMATES_FORMAT_VERSION,
        rows,
        truth: dataset.ground_truth().map(Truth::of),
        bootstrap: bootstrap.as_ref().map(|b| BootstrapSummary {
            replicates: config.bootstrap.replicates,
            dropped: b.dropped,
            scheme: config.bootstrap.scheme,
            variance: config.bootstrap.variance,
            interval: config.bootstrap.interval,
            refit_propensity: config.bootstrap.refit_propensity,
        }),
    };

    let subgroups = if config.subgroups >= 2 {
        if dataset.features().has_prior_shares {
            Some(subgroup_table(&suite, dataset, config.subgroups)?)
        } else {
            log::warn!("no prior-share data; subgroup table skipped");
            None
        }
    } else {
        None
    };

    let estimates = all.into_iter().take(suite.visible).collect();
    Ok(EstimateOutcome { estimates, table, bias, bootstrap, subgroups })
}

fn subgroup_table(suite: &Suite<'_>, dataset: &Dataset, k: usize) -> Result<SubgroupsFile, CliError> {
    let buckets = popularity_buckets(dataset, k)?;
    let ones = vec![1.0; dataset.len()];
    let mut out = Vec::new();
    for b in 0..buckets.n_buckets() {
        let w = buckets.restrict(dataset, &ones, b);
        let domains = buckets.domains_in(dataset, b);
        let results: Vec<(String, peerstrat::Result<EffectEstimate>)> = suite.slots[..suite.visible]
            .iter()
            .map(|s| (slot_label(s), suite.run_slot(s, &w, ScoreMode::Refit)))
            .collect();
        let exp_rr = results[suite.exp].1.as_ref().ok().map(EffectEstimate::rr);
        let mut rows = Vec::new();
        for (estimator, r) in results {
            let mut row = SubgroupRow {
                estimator,
                p0: None,
                p1: None,
                rr: None,
                delta: None,
                rr_percent_bias: None,
                error: None,
            };
            match r {
                Ok(e) => {
                    row.p0 = Some(e.p0);
                    row.p1 = Some(e.p1);
                    row.rr = Some(e.rr());
                    row.delta = Some(e.delta());
                    row.rr_percent_bias = exp_rr.and_then(|x| rr_percent_bias(e.rr(), x).ok());
                }
                Err(err) if err.is_zero_weight() => {
                    log::warn!("subgroup {b}: {} unavailable: {err}", row.estimator);
                    row.error = Some(err.to_string());
                }
                Err(err) => return Err(err.into()),
            }
            rows.push(row);
        }
        out.push(SubgroupBucket {
            bucket: b,
            min_prior_sharers: buckets.ranges[b].0,
            max_prior_sharers: buckets.ranges[b].1,
            truth: dataset.ground_truth().and_then(|t| t.restricted(&domains)).map(|(p0, p1)| Truth::from_rates(p0, p1)),
            domains,
            rows,
        });
    }
    Ok(SubgroupsFile { requested: k, buckets: out })
}

fn slot_label(slot: &Slot<'_>) -> String {
    match slot {
        Slot::Experimental => "exp".into(),
        Slot::Naive => "naive".into(),
        Slot::GrandNaive => "grand_naive".into(),
        Slot::Adjusted(p) => p.spec().name.to_string(),
    }
}

/// Per-domain and per-stratum diagnostics.
pub fn write_diagnostics(estimates: &[EffectEstimate], domains_path: &Path, strata_path: &Path) -> Result<(), CliError> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut d = csv::Writer::from_path(domains_path)?;
    d.write_record([
        "estimator",
        "domain",
        "n_exposed",
        "n_necg",
        "p0",
        "flag",
        "requested_strata",
        "n_strata",
        "merged_strata",
        "converged",
    ])?;
    let mut s = csv::Writer::from_path(strata_path)?;
    s.write_record([
        "estimator",
        "domain",
        "stratum",
        "lower",
        "upper",
        "n_exposed",
        "n_necg",
        "p0",
        "p1_exposed",
        "exposed_share",
        "merged_into",
    ])?;
    for e in estimates {
        for dom in &e.domains {
            d.write_record([
                e.estimator.clone(),
                dom.domain_id.clone(),
                dom.n_exposed.to_string(),
                dom.n_necg.to_string(),
                opt(dom.p0),
                dom.flag.as_str().to_string(),
                dom.requested_strata.to_string(),
                dom.n_strata.to_string(),
                dom.merged_strata.to_string(),
                dom.converged.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
            for st in &dom.strata {
                s.write_record([
                    e.estimator.clone(),
                    dom.domain_id.clone(),
                    st.index.to_string(),
                    st.lower.to_string(),
                    st.upper.to_string(),
                    st.n_exposed.to_string(),
                    st.n_necg.to_string(),
                    opt(st.p0),
                    opt(st.p1_exposed),
                    st.exposed_share.to_string(),
                    st.merged_into.map(|m| m.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    d.flush().map_err(|e| CliError::io(domains_path, e))?;
    s.flush().map_err(|e| CliError::io(strata_path, e))
}
