//! The `peerstrat` command line: simulate, ingest-check, estimate, report, run-all.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use peerstrat::data_model::validate_arms;
use peerstrat::{emit, generate, ingest, Format, Schema, SimConfig};

use crate::artifacts::{
    write_json, Manifest, BIAS_CSV, BIAS_JSON, DOMAINS_CSV, ESTIMATES_CSV, ESTIMATES_JSON, REPLICATES_CSV,
    STRATA_CSV, SUBGROUPS_CSV, SUBGROUPS_JSON,
};
use crate::config::{load_config_file, resolve, RunConfig};
use crate::error::CliError;
use crate::report::RunArtifacts;

#[derive(Parser, Debug)]
#[command(name = "peerstrat", version, about = "Propensity-stratified peer-effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Validate an input file and print arm counts per domain.
    IngestCheck(IngestArgs),
    /// Run the estimators and write the report tables.
    Estimate(RunArgs),
    /// Render a text summary and plot-data CSVs from estimate directories.
    Report(ReportArgs),
    /// Estimate then report; simulated data is also written to OUTPUT/data.
    RunAll(RunArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulator config (TOML); its values override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "data")]
    output: PathBuf,
    #[arg(long, default_value = "ndjson", value_parser = ["ndjson", "csv"])]
    format: String,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 20000]
    #[arg(long)]
    n_users: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    n_domains: Option<usize>,
    /// Confounding strength [default: 1.0]
    #[arg(long)]
    homophily: Option<f64>,
    #[arg(long, default_value = "info")]
    log_level: String,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Column mapping (TOML) [default: identity mapping]
    #[arg(long)]
    schema: Option<PathBuf>,
    /// [default: from the file extension]
    #[arg(long, value_parser = ["ndjson", "csv"])]
    format: Option<String>,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "info")]
    log_level: String,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Estimate directories; several are merged when their manifests match.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// [default: the first directory]
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "info")]
    log_level: String,
}

/// Flags left unset fall back to the config file, then the defaults shown.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Run config (TOML) or a manifest.json of an earlier run; overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observation file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Column mapping (TOML) [default: identity mapping]
    #[arg(long)]
    schema: Option<PathBuf>,
    /// [default: from the file extension; ndjson for simulated data]
    #[arg(long, value_parser = ["ndjson", "csv"])]
    format: Option<String>,
    /// Ground-truth sidecar for an ingested simulator dataset.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Simulator config (TOML) to generate data instead of --input.
    #[arg(long)]
    simulate: Option<PathBuf>,
    /// Comma-separated model specs [default: AMs,Ms,AM,M,As,Ds,A,D,naive]
    #[arg(long, value_delimiter = ',')]
    specs: Option<Vec<String>>,
    /// Ridge penalty [default: 0.5]
    #[arg(long)]
    penalty: Option<f64>,
    /// [default: total]
    #[arg(long, value_parser = ["total", "per_observation"])]
    penalty_scale: Option<String>,
    /// Fixed number of strata per domain [default: round(sqrt(exposed)), 1..=500]
    #[arg(long)]
    strata: Option<usize>,
    /// Rows that define stratum boundaries [default: pooled]
    #[arg(long, value_parser = ["pooled", "exposed_only"])]
    strata_basis: Option<String>,
    /// Fit on raw rather than standardized features.
    #[arg(long)]
    no_standardize: bool,
    /// Add indicator columns for missing dense features.
    #[arg(long)]
    missing_indicators: bool,
    /// Bootstrap replicates, 0 to skip [default: 500]
    #[arg(long)]
    replicates: Option<usize>,
    /// Bootstrap seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: multinomial]
    #[arg(long, value_parser = ["multinomial", "poisson", "unit"])]
    scheme: Option<String>,
    /// [default: two_way_additive]
    #[arg(long, value_parser = ["two_way_additive", "product_weights"])]
    variance: Option<String>,
    /// [default: normal]
    #[arg(long, value_parser = ["normal", "percentile"])]
    interval: Option<String>,
    /// Reuse point-estimate propensity scores in bootstrap replicates.
    #[arg(long)]
    fixed_scores: bool,
    /// Output directory [default: out]
    #[arg(long)]
    output: Option<PathBuf>,
    /// Prior-popularity subgroups, 0 to skip [default: 5]
    #[arg(long)]
    subgroups: Option<usize>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    threads: Option<usize>,
    /// [default: info]
    #[arg(long)]
    log_level: Option<String>,
    /// Also report the NECG rate pooled over all domains.
    #[arg(long)]
    grand_naive: bool,
    /// Write every bootstrap replicate to replicates.csv.
    #[arg(long)]
    dump_replicates: bool,
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

impl RunArgs {
    fn flag_table(&self) -> Result<toml::Value, CliError> {
        use toml::Value as V;
        let mut t = toml::map::Map::new();
        let mut put = |k: &str, v: V| {
            t.insert(k.to_string(), v);
        };
        let mut boot = toml::map::Map::new();
        let mut strata = toml::map::Map::new();
        if let Some(p) = &self.input {
            put("input", path_value(p));
        }
        if let Some(p) = &self.schema {
            put("schema", path_value(p));
        }
        if let Some(f) = &self.format {
            put("format", V::String(f.clone()));
        }
        if let Some(p) = &self.ground_truth {
            put("ground_truth", path_value(p));
        }
        if let Some(p) = &self.simulate {
            put("simulate", load_config_file(p)?);
        }
        if let Some(s) = &self.specs {
            put("specs", V::Array(s.iter().map(|x| V::String(x.trim().to_string())).collect()));
        }
        if let Some(x) = self.penalty {
            put("penalty", V::Float(x));
        }
        if let Some(x) = &self.penalty_scale {
            put("penalty_scale", V::String(x.clone()));
        }
        if self.no_standardize {
            put("standardize", V::Boolean(false));
        }
        if self.missing_indicators {
            put("missing_indicators", V::Boolean(true));
        }
        if let Some(p) = &self.output {
            put("output", path_value(p));
        }
        if let Some(k) = self.subgroups {
            put("subgroups", V::Integer(k as i64));
        }
        if let Some(n) = self.threads {
            put("threads", V::Integer(n as i64));
        }
        if let Some(l) = &self.log_level {
            put("log_level", V::String(l.clone()));
        }
        if self.grand_naive {
            put("grand_naive", V::Boolean(true));
        }
        if self.dump_replicates {
            put("dump_replicates", V::Boolean(true));
        }
        if let Some(j) = self.strata {
            strata.insert("fixed".into(), V::Integer(j as i64));
        }
        if let Some(b) = &self.strata_basis {
            strata.insert("basis".into(), V::String(b.clone()));
        }
        if let Some(r) = self.replicates {
            boot.insert("replicates".into(), V::Integer(r as i64));
        }
        if let Some(s) = self.seed {
            let s = i64::try_from(s).map_err(|_| CliError::Usage(format!("seed {s} is too large")))?;
            boot.insert("seed".into(), V::Integer(s));
        }
        if let Some(x) = &self.scheme {
            boot.insert("scheme".into(), V::String(x.clone()));
        }
        if let Some(x) = &self.variance {
            boot.insert("variance".into(), V::String(x.clone()));
        }
        if let Some(x) = &self.interval {
            boot.insert("interval".into(), V::String(x.clone()));
        }
        if self.fixed_scores {
            boot.insert("refit_propensity".into(), V::Boolean(false));
        }
        if !strata.is_empty() {
            t.insert("strata".into(), V::Table(strata));
        }
        if !boot.is_empty() {
            t.insert("bootstrap".into(), V::Table(boot));
        }
        Ok(V::Table(t))
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = self.config.as_deref().map(load_config_file).transpose()?;
        resolve(self.flag_table()?, file)
    }
}

fn init_logging(level: &str) -> Result<(), CliError> {
    let filter: LevelFilter = level.parse().map_err(|_| CliError::Usage(format!("unknown log level {level:?}")))?;
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    log::set_max_level(filter);
    Ok(())
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    init_logging(&args.log_level)?;
    let mut value = toml::Value::try_from(SimConfig::default()).expect("defaults serialize");
    let mut flags = toml::map::Map::new();
    if let Some(s) = args.seed {
        let s = i64::try_from(s).map_err(|_| CliError::Usage(format!("seed {s} is too large")))?;
        flags.insert("seed".into(), toml::Value::Integer(s));
    }
    if let Some(n) = args.n_users {
        flags.insert("n_users".into(), toml::Value::Integer(n as i64));
    }
    if let Some(n) = args.n_domains {
        flags.insert("n_domains".into(), toml::Value::Integer(n as i64));
    }
    if let Some(h) = args.homophily {
        flags.insert("homophily".into(), toml::Value::Float(h));
    }
    config::merge(&mut value, toml::Value::Table(flags));
    if let Some(p) = &args.config {
        config::merge(&mut value, load_config_file(p)?);
    }
    let sim: SimConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
    sim.validate()?;
    let format: Format = args.format.parse()?;
    let dataset = generate(&sim)?;
    let files = emit(&dataset, &args.output, format)?;
    let sidecar = args.output.join("sim_config.toml");
    std::fs::write(&sidecar, sim.to_toml_string()).map_err(|e| CliError::io(&sidecar, e))?;
    log::info!("wrote {} observations to {}", dataset.len(), files.observations.display());
    Ok(())
}

fn cmd_ingest_check(args: &IngestArgs) -> Result<(), CliError> {
    init_logging(&args.log_level)?;
    let format = match &args.format {
        Some(f) => f.parse()?,
        None => Format::from_path(&args.input)
            .ok_or_else(|| CliError::Usage(format!("cannot infer the format of {}", args.input.display())))?,
    };
    let schema = match &args.schema {
        Some(p) => Schema::load(p)?,
        None => Schema::default(),
    };
    let dataset = ingest(&args.input, format, &schema)?;
    let summary = validate_arms(&dataset);
    for d in summary.zero_weight_domains() {
        log::warn!("domain {d} has no exposed pairs and carries zero weight");
    }
    match &args.output {
        Some(p) => write_json(p, &summary)?,
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

/// Runs estimation into `config.output`; returns the files written.
fn estimate_into(config: &RunConfig, command: &str, emit_data: bool) -> Result<(Manifest, Vec<String>), CliError> {
    let out = &config.output;
    create_dir(out)?;
    let data_dir = out.join("data");
    let loaded = run::load(config, emit_data.then_some(data_dir.as_path()))?;
    let outcome = run::estimate(&loaded.dataset, config)?;
    let mut written = vec![ESTIMATES_JSON, ESTIMATES_CSV, BIAS_JSON, BIAS_CSV, DOMAINS_CSV, STRATA_CSV];
    write_json(&out.join(ESTIMATES_JSON), &outcome.table)?;
    outcome.table.write_csv(&out.join(ESTIMATES_CSV))?;
    outcome.bias.write_json(&out.join(BIAS_JSON))?;
    outcome.bias.write_csv(&out.join(BIAS_CSV))?;
    run::write_diagnostics(&outcome.estimates, &out.join(DOMAINS_CSV), &out.join(STRATA_CSV))?;
    if let Some(s) = &outcome.subgroups {
        write_json(&out.join(SUBGROUPS_JSON), s)?;
        s.write_csv(&out.join(SUBGROUPS_CSV))?;
        written.extend([SUBGROUPS_JSON, SUBGROUPS_CSV]);
    }
    if config.dump_replicates {
        if let Some(b) = &outcome.bootstrap {
            b.write_replicates_csv(&out.join(REPLICATES_CSV))?;
            written.push(REPLICATES_CSV);
        }
    }
    let mut manifest = Manifest::new(command, config, loaded.input_hash);
    let mut names: Vec<String> = written.iter().map(|s| s.to_string()).collect();
    if emit_data && config.simulate.is_some() {
        for entry in std::fs::read_dir(&data_dir).map_err(|e| CliError::io(&data_dir, e))? {
            let entry = entry.map_err(|e| CliError::io(&data_dir, e))?;
            names.push(format!("data/{}", entry.file_name().to_string_lossy()));
        }
    }
    for n in &names {
        manifest.record(out, n)?;
    }
    Ok((manifest, names))
}

fn cmd_estimate(args: &RunArgs) -> Result<(), CliError> {
    let config = args.resolve()?;
    init_logging(&config.log_level)?;
    with_threads(config.threads, || {
        let (manifest, _) = estimate_into(&config, "estimate", false)?;
        manifest.write(&config.output)
    })?
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    init_logging(&args.log_level)?;
    let runs = args.dirs.iter().map(|d| RunArtifacts::load(d)).collect::<Result<Vec<_>, _>>()?;
    let merged = report::merge_runs(runs)?;
    let out = args.output.clone().unwrap_or_else(|| args.dirs[0].clone());
    let written = report::render(&merged, &out)?;
    log::info!("wrote {} to {}", written.join(", "), out.display());
    Ok(())
}

fn cmd_run_all(args: &RunArgs) -> Result<(), CliError> {
    let config = args.resolve()?;
    init_logging(&config.log_level)?;
    with_threads(config.threads, || {
        let (mut manifest, _) = estimate_into(&config, "run-all", true)?;
        manifest.write(&config.output)?;
        let run = RunArtifacts::load(&config.output)?;
        for name in report::render(&run, &config.output)? {
            manifest.record(&config.output, name)?;
        }
        manifest.write(&config.output)
    })?
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::IngestCheck(a) => cmd_ingest_check(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Report(a) => cmd_report(a),
        Command::RunAll(a) => cmd_run_all(a),
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit code: 0 success, 1 usage error, 2 data error, 3 numerical failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
