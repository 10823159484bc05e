//! Text summary and plot-data CSVs from one or more estimate directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use peerstrat::{BiasReport, Interval};
use serde::Serialize;

use crate::artifacts::{read_json, EstimatesFile, Manifest, SubgroupsFile, BIAS_JSON, ESTIMATES_JSON, SUBGROUPS_JSON};
use crate::error::CliError;

pub const SUMMARY: &str = "summary.txt";
pub const FIG_BIAS: &str = "plot_bias.csv";
pub const FIG_ESTIMATES: &str = "plot_estimates.csv";
pub const FIG_SUBGROUPS: &str = "plot_subgroups.csv";

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub estimates: EstimatesFile,
    pub bias: BiasReport,
    pub subgroups: Option<SubgroupsFile>,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let sub = dir.join(SUBGROUPS_JSON);
        Ok(RunArtifacts {
            dir: dir.to_path_buf(),
            manifest: Manifest::load(dir)?,
            estimates: read_json(&dir.join(ESTIMATES_JSON))?,
            bias: read_json(&dir.join(BIAS_JSON))?,
            subgroups: if sub.exists() { Some(read_json(&sub)?) } else { None },
        })
    }
}

/// Rows are compared by their JSON form so that NaN fields compare equal.
fn union<T: Clone + Serialize>(into: &mut Vec<T>, from: &[T], key: impl Fn(&T) -> &str, what: &str) -> Result<(), CliError> {
    let json = |x: &T| serde_json::to_string(x).expect("row serializes");
    for item in from {
        match into.iter().find(|x| key(x) == key(item)) {
            Some(existing) if json(existing) != json(item) => {
                return Err(CliError::Data(format!("conflicting {what} rows for {}", key(item))));
            }
            Some(_) => {}
            None => into.push(item.clone()),
        }
    }
    Ok(())
}

/// Combines runs that share a merge key; rows are unioned by estimator.
pub fn merge_runs(runs: Vec<RunArtifacts>) -> Result<RunArtifacts, CliError> {
    fn json<T: Serialize>(x: &T) -> String {
        serde_json::to_string(x).expect("serializes")
    }
    let mut iter = runs.into_iter();
    let mut base = iter.next().ok_or_else(|| CliError::Usage("no estimate directory given".into()))?;
    for run in iter {
        let (a, b) = (&base.manifest, &run.manifest);
        if a.merge_key != b.merge_key || a.input_hash != b.input_hash || a.seeds != b.seeds {
            return Err(CliError::Data(format!(
                "manifests of {} and {} do not match (different data, seeds or settings); refusing to merge",
                base.dir.display(),
                run.dir.display()
            )));
        }
        if json(&base.estimates.truth) != json(&run.estimates.truth) || json(&base.bias.rr_exp) != json(&run.bias.rr_exp) {
            return Err(CliError::Data("runs disagree on the experimental benchmark".into()));
        }
        union(&mut base.estimates.rows, &run.estimates.rows, |r| &r.estimator, "estimate")?;
        union(&mut base.bias.rows, &run.bias.rows, |r| &r.estimator, "bias")?;
        match (&mut base.subgroups, run.subgroups) {
            (Some(s), Some(t)) => {
                if s.buckets.len() != t.buckets.len() {
                    return Err(CliError::Data("runs disagree on subgroup buckets".into()));
                }
                for (x, y) in s.buckets.iter_mut().zip(&t.buckets) {
                    if x.domains != y.domains {
                        return Err(CliError::Data("runs disagree on subgroup buckets".into()));
                    }
                    union(&mut x.rows, &y.rows, |r| &r.estimator, "subgroup")?;
                }
            }
            (s @ None, Some(t)) => *s = Some(t),
            _ => {}
        }
    }
    Ok(base)
}

/// `x` with four significant figures.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.000".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-3..5).contains(&mag) {
        return format!("{x:.3e}");
    }
    let s = format!("{:.*}", (3 - mag).max(0) as usize, x);
    // Rounding can carry into another digit (9.9996 → 10.000).
    let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
    if digits.trim_start_matches('0').len() > 4 && s.contains('.') {
        return format!("{:.*}", (2 - mag).max(0) as usize, x);
    }
    s
}

fn with_ci(v: f64, ci: &Option<Interval>) -> String {
    match ci {
        Some(i) => format!("{} [{}, {}]", sig4(v), sig4(i.low), sig4(i.high)),
        None => sig4(v),
    }
}

/// Estimators in display order: the experimental row, then the rest by
/// absolute RR bias.
fn display_order(run: &RunArtifacts) -> Vec<String> {
    let mut rest: Vec<(f64, String)> = run
        .estimates
        .rows
        .iter()
        .filter(|r| r.estimator != "exp")
        .map(|r| (run.bias.row(&r.estimator).map_or(f64::INFINITY, |b| b.rr_percent_bias.abs()), r.estimator.clone()))
        .collect();
    rest.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut order = Vec::new();
    if run.estimates.row("exp").is_some() {
        order.push("exp".to_string());
    }
    order.extend(rest.into_iter().map(|(_, n)| n));
    order
}

pub fn summary_text(run: &RunArtifacts) -> String {
    let m = &run.manifest;
    let mut out = String::new();
    let _ = writeln!(out, "{} {} report", m.tool, m.version);
    let _ = writeln!(out, "config_hash {}", m.config_hash);
    if let Some(h) = &m.input_hash {
        let _ = writeln!(out, "input_hash  {h}");
    }
    let _ = writeln!(out, "bootstrap seed {}", m.seeds.bootstrap);
    if let Some(b) = &run.estimates.bootstrap {
        let _ = writeln!(out, "bootstrap replicates {} (dropped {})", b.replicates, b.dropped);
    }
    if let Some(t) = &run.estimates.truth {
        let _ = writeln!(out, "truth p0 {}  RR {}  delta {}", sig4(t.p0), sig4(t.rr), sig4(t.delta));
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<12}  {:<32}  {:<24}  {:<32}  {:>10}  {:>12}  {:>10}",
        "estimator", "p0 [95% CI]", "RR [95% CI]", "delta [95% CI]", "RR bias %", "delta % max", "reduction %"
    );
    for name in display_order(run) {
        let r = run.estimates.row(&name).expect("ordered rows exist");
        let (bias, dmax, red) = match run.bias.row(&name) {
            Some(b) => (sig4(b.rr_percent_bias), sig4(b.delta_percent_of_max), b.bias_reduction.map_or("-".into(), sig4)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{:<12}  {:<32}  {:<24}  {:<32}  {:>10}  {:>12}  {:>10}",
            name,
            with_ci(r.p0, &r.p0_ci),
            with_ci(r.rr, &r.rr_ci),
            with_ci(r.delta, &r.delta_ci),
            bias,
            dmax,
            red
        );
    }
    let flagged: Vec<String> = run
        .estimates
        .rows
        .iter()
        .filter(|r| !r.flagged_domains.is_empty())
        .map(|r| format!("{}: {}", r.estimator, r.flagged_domains.join(", ")))
        .collect();
    if !flagged.is_empty() {
        out.push_str("\nflagged domains\n");
        for f in flagged {
            let _ = writeln!(out, "  {f}");
        }
    }
    if let Some(s) = &run.subgroups {
        let _ = writeln!(out, "\nsubgroups by prior domain popularity ({} requested)", s.requested);
        for b in &s.buckets {
            let _ = write!(
                out,
                "  bucket {} (prior sharers {}-{}, {} domains)",
                b.bucket,
                b.min_prior_sharers,
                b.max_prior_sharers,
                b.domains.len()
            );
            if let Some(t) = &b.truth {
                let _ = write!(out, " truth RR {}", sig4(t.rr));
            }
            out.push('\n');
            for r in &b.rows {
                let rr = r.rr.map_or("-".into(), sig4);
                let bias = r.rr_percent_bias.map_or("-".into(), sig4);
                match &r.error {
                    Some(e) => {
                        let _ = writeln!(out, "    {:<12}  unavailable: {e}", r.estimator);
                    }
                    None => {
                        let _ = writeln!(out, "    {:<12}  RR {:>10}  RR bias % {:>10}", r.estimator, rr, bias);
                    }
                }
            }
        }
    }
    out
}

fn write_plot_csvs(run: &RunArtifacts, dir: &Path) -> Result<Vec<&'static str>, CliError> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let lo = |i: &Option<Interval>| opt(i.map(|i| i.low));
    let hi = |i: &Option<Interval>| opt(i.map(|i| i.high));
    let order = display_order(run);
    let mut written = vec![FIG_ESTIMATES];

    let path = dir.join(FIG_ESTIMATES);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["estimator", "p0", "p0_low", "p0_high", "rr", "rr_low", "rr_high", "delta", "delta_low", "delta_high"])?;
    for name in &order {
        let r = run.estimates.row(name).expect("ordered rows exist");
        w.write_record([
            name.clone(),
            r.p0.to_string(),
            lo(&r.p0_ci),
            hi(&r.p0_ci),
            r.rr.to_string(),
            lo(&r.rr_ci),
            hi(&r.rr_ci),
            r.delta.to_string(),
            lo(&r.delta_ci),
            hi(&r.delta_ci),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = dir.join(FIG_BIAS);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "estimator",
        "rr_percent_bias",
        "rr_percent_bias_low",
        "rr_percent_bias_high",
        "delta_percent_of_max",
        "delta_percent_of_max_low",
        "delta_percent_of_max_high",
        "underestimate",
    ])?;
    for name in &order {
        if let Some(b) = run.bias.row(name) {
            w.write_record([
                name.clone(),
                b.rr_percent_bias.to_string(),
                lo(&b.rr_percent_bias_ci),
                hi(&b.rr_percent_bias_ci),
                b.delta_percent_of_max.to_string(),
                lo(&b.delta_percent_of_max_ci),
                hi(&b.delta_percent_of_max_ci),
                b.underestimate.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    written.push(FIG_BIAS);

    if let Some(s) = &run.subgroups {
        s.write_csv(&dir.join(FIG_SUBGROUPS))?;
        written.push(FIG_SUBGROUPS);
    }
    Ok(written)
}

/// Writes the summary and plot CSVs into `out`; returns the file names.
pub fn render(run: &RunArtifacts, out: &Path) -> Result<Vec<&'static str>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(SUMMARY);
    std::fs::write(&path, summary_text(run)).map_err(|e| CliError::io(&path, e))?;
    let mut written = vec![SUMMARY];
    written.extend(write_plot_csvs(run, out)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_significant_figures() {
        assert_eq!(sig4(6.79), "6.790");
        assert_eq!(sig4(28.5421), "28.54");
        assert_eq!(sig4(320.33), "320.3");
        assert_eq!(sig4(1.751e-4), "1.751e-4");
        assert_eq!(sig4(0.001128), "0.001128");
        assert_eq!(sig4(-9.58), "-9.580");
        assert_eq!(sig4(9.99996), "10.00");
        assert_eq!(sig4(123456.0), "1.235e5");
        assert_eq!(sig4(0.0), "0.000");
    }
}
