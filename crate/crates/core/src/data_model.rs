//! Observation table, arms, per-user covariate storage, and file ingestion.
//!
//! A [`Dataset`] holds one row per user–item pair. Identifiers are interned to
//! dense `u32` indices; the domain vocabulary is kept in lexicographic order so
//! that a dataset written by [`crate::simulator::emit`] and read back by
//! [`ingest`] is identical field for field.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::simulator::GroundTruth;

/// Treatment arm of a user–item pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    /// Exposed to a peer sharing the item.
    #[serde(rename = "exposed")]
    Exposed,
    /// Would-be-exposed pair randomly held out ("no feed").
    #[serde(rename = "exp_control")]
    ExperimentalControl,
    /// Unexposed pair from the non-experimental control group.
    #[serde(rename = "necg")]
    NecgUnexposed,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Exposed, Arm::ExperimentalControl, Arm::NecgUnexposed];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Exposed => "exposed",
            Arm::ExperimentalControl => "exp_control",
            Arm::NecgUnexposed => "necg",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exposed" => Ok(Arm::Exposed),
            "exp_control" => Ok(Arm::ExperimentalControl),
            "necg" => Ok(Arm::NecgUnexposed),
            other => Err(other.to_string()),
        }
    }
}

/// Raw per-user covariates. Categorical fields are stored as level codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DenseField {
    Age,
    /// 0 = female, 1 = male, 2 = unknown.
    Gender,
    FriendCount,
    FriendsInitiated,
    TenureDays,
    /// 0/1.
    ProfilePicture,
    DaysActive30,
    DaysActive91,
    DaysActive182,
    ActionCount,
    PostCount,
    CommentCount,
    LikeCount,
    Shares1m,
    UniqueDomains6m,
}

pub const DENSE_FIELDS: usize = 15;

impl DenseField {
    pub const ALL: [DenseField; DENSE_FIELDS] = [
        DenseField::Age,
        DenseField::Gender,
        DenseField::FriendCount,
        DenseField::FriendsInitiated,
        DenseField::TenureDays,
        DenseField::ProfilePicture,
        DenseField::DaysActive30,
        DenseField::DaysActive91,
        DenseField::DaysActive182,
        DenseField::ActionCount,
        DenseField::PostCount,
        DenseField::CommentCount,
        DenseField::LikeCount,
        DenseField::Shares1m,
        DenseField::UniqueDomains6m,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DenseField::Age => "age",
            DenseField::Gender => "gender",
            DenseField::FriendCount => "friend_count",
            DenseField::FriendsInitiated => "friends_initiated",
            DenseField::TenureDays => "tenure_days",
            DenseField::ProfilePicture => "profile_picture",
            DenseField::DaysActive30 => "days_active_30",
            DenseField::DaysActive91 => "days_active_91",
            DenseField::DaysActive182 => "days_active_182",
            DenseField::ActionCount => "action_count",
            DenseField::PostCount => "post_count",
            DenseField::CommentCount => "comment_count",
            DenseField::LikeCount => "like_count",
            DenseField::Shares1m => "shares_1m",
            DenseField::UniqueDomains6m => "unique_domains_6m",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn is_count(self) -> bool {
        !matches!(self, DenseField::Age | DenseField::Gender | DenseField::ProfilePicture)
    }
}

pub const GENDER_LEVELS: [&str; 3] = ["female", "male", "unknown"];

/// Covariates of one user. `None` marks a value absent from the input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserFeatures {
    pub dense: [Option<f64>; DENSE_FIELDS],
    /// Prior-period share counts, `(domain index, count)`, sorted by domain, nonzero only.
    pub prior_shares: Vec<(u32, u32)>,
}

impl UserFeatures {
    pub fn get(&self, field: DenseField) -> Option<f64> {
        self.dense[field.index()]
    }

    pub fn set(&mut self, field: DenseField, value: f64) {
        self.dense[field.index()] = Some(value);
    }

    /// Prior shares of this user in `domain`, zero when absent.
    pub fn prior_share_count(&self, domain: u32) -> u32 {
        match self.prior_shares.binary_search_by_key(&domain, |&(d, _)| d) {
            Ok(i) => self.prior_shares[i].1,
            Err(_) => 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserFeatureStore {
    pub users: Vec<UserFeatures>,
    /// Whether the input carried a prior-share column at all.
    pub has_prior_shares: bool,
}

impl UserFeatureStore {
    /// Number of users with at least one prior share in each domain.
    pub fn prior_unique_sharers(&self, n_domains: usize) -> Vec<u32> {
        let mut out = vec![0u32; n_domains];
        for user in &self.users {
            for &(d, c) in &user.prior_shares {
                if c > 0 {
                    out[d as usize] += 1;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub user: u32,
    pub item: u32,
    pub domain: u32,
    pub arm: Arm,
    pub outcome: bool,
    /// True confounding index, only known for simulated data.
    pub confounder: Option<f64>,
}

/// One input row before interning.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub user_id: String,
    pub item_id: String,
    pub domain_id: String,
    pub arm: Arm,
    pub outcome: bool,
    pub confounder: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub ground_truth: Option<GroundTruth>,
}

/// Immutable observation table with its feature store and domain index.
#[derive(Debug, Clone)]
pub struct Dataset {
    users: Vec<String>,
    items: Vec<String>,
    domains: Vec<String>,
    observations: Vec<Observation>,
    features: UserFeatureStore,
    domain_index: Vec<Vec<u32>>,
    provenance: Provenance,
}

impl Dataset {
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn features(&self) -> &UserFeatureStore {
        &self.features
    }

    pub fn user_features(&self, user: u32) -> &UserFeatures {
        &self.features.users[user as usize]
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Domain vocabulary, including domains only seen in prior shares.
    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_id(&self, domain: u32) -> &str {
        &self.domains[domain as usize]
    }

    pub fn domain_index_of(&self, id: &str) -> Option<u32> {
        self.domains.binary_search_by(|d| d.as_str().cmp(id)).ok().map(|i| i as u32)
    }

    /// Observation indices belonging to `domain`, in table order.
    pub fn domain_rows(&self, domain: u32) -> &[u32] {
        &self.domain_index[domain as usize]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.provenance.ground_truth.as_ref()
    }

    pub fn set_ground_truth(&mut self, truth: Option<GroundTruth>) {
        self.provenance.ground_truth = truth;
    }

    pub fn has_confounder(&self) -> bool {
        !self.observations.is_empty() && self.observations.iter().all(|o| o.confounder.is_some())
    }

    /// Equality on everything except the provenance block.
    pub fn content_eq(&self, other: &Dataset) -> bool {
        self.users == other.users
            && self.items == other.items
            && self.domains == other.domains
            && self.observations == other.observations
            && self.features == other.features
            && self.domain_index == other.domain_index
    }

    pub fn record(&self, index: usize) -> ObservationRecord {
        let o = &self.observations[index];
        ObservationRecord {
            user_id: self.users[o.user as usize].clone(),
            item_id: self.items[o.item as usize].clone(),
            domain_id: self.domains[o.domain as usize].clone(),
            arm: o.arm,
            outcome: o.outcome,
            confounder: o.confounder,
        }
    }
}

/// Incrementally assembles a [`Dataset`], enforcing row invariants.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    user_ix: HashMap<String, u32>,
    users: Vec<String>,
    user_features: Vec<Option<UserFeatures>>,
    item_ix: HashMap<String, u32>,
    items: Vec<String>,
    item_domain: Vec<u32>,
    domain_ix: HashMap<String, u32>,
    domains: Vec<String>,
    pairs: HashSet<(u32, u32)>,
    observations: Vec<Observation>,
    has_prior_shares: bool,
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Interns a domain id, returning its builder-local index.
    pub fn domain(&mut self, id: &str) -> u32 {
        if let Some(&i) = self.domain_ix.get(id) {
            return i;
        }
        let i = self.domains.len() as u32;
        self.domains.push(id.to_string());
        self.domain_ix.insert(id.to_string(), i);
        i
    }

    fn user(&mut self, id: &str) -> u32 {
        if let Some(&i) = self.user_ix.get(id) {
            return i;
        }
        let i = self.users.len() as u32;
        self.users.push(id.to_string());
        self.user_features.push(None);
        self.user_ix.insert(id.to_string(), i);
        i
    }

    pub fn mark_prior_shares(&mut self) {
        self.has_prior_shares = true;
    }

    /// Attaches features to a user. Prior-share domains must already be interned
    /// through [`DatasetBuilder::domain`]. A second, different feature set for the
    /// same user is an error.
    pub fn set_user_features(&mut self, row: usize, user_id: &str, mut features: UserFeatures) -> Result<()> {
        features.prior_shares.retain(|&(_, c)| c > 0);
        features.prior_shares.sort_unstable();
        let u = self.user(user_id) as usize;
        match &self.user_features[u] {
            Some(existing) if *existing != features => {
                Err(Error::InconsistentFeatures { row, user: user_id.to_string() })
            }
            Some(_) => Ok(()),
            None => {
                self.user_features[u] = Some(features);
                Ok(())
            }
        }
    }

    pub fn push(&mut self, row: usize, record: ObservationRecord) -> Result<()> {
        let domain = self.domain(&record.domain_id);
        let item = match self.item_ix.get(&record.item_id) {
            Some(&i) => {
                if self.item_domain[i as usize] != domain {
                    return Err(Error::InconsistentDomain {
                        row,
                        item: record.item_id,
                        expected: self.domains[self.item_domain[i as usize] as usize].clone(),
                        found: record.domain_id,
                    });
                }
                i
            }
            None => {
                let i = self.items.len() as u32;
                self.items.push(record.item_id.clone());
                self.item_domain.push(domain);
                self.item_ix.insert(record.item_id.clone(), i);
                i
            }
        };
        let user = self.user(&record.user_id);
        if !self.pairs.insert((user, item)) {
            return Err(Error::DuplicatePair { row, user: record.user_id, item: record.item_id });
        }
        if let Some(c) = record.confounder {
            if !c.is_finite() {
                return Err(Error::MalformedRow { row, reason: "non-finite confounder".into() });
            }
        }
        self.observations.push(Observation {
            user,
            item,
            domain,
            arm: record.arm,
            outcome: record.outcome,
            confounder: record.confounder,
        });
        Ok(())
    }

    pub fn build(self, provenance: Provenance) -> Dataset {
        // Canonical (lexicographic) domain order.
        let mut order: Vec<u32> = (0..self.domains.len() as u32).collect();
        order.sort_by(|&a, &b| self.domains[a as usize].cmp(&self.domains[b as usize]));
        let mut remap = vec![0u32; order.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old as usize] = new as u32;
        }
        let domains: Vec<String> = order.iter().map(|&o| self.domains[o as usize].clone()).collect();

        let mut observations = self.observations;
        let mut domain_index = vec![Vec::new(); domains.len()];
        for (i, o) in observations.iter_mut().enumerate() {
            o.domain = remap[o.domain as usize];
            domain_index[o.domain as usize].push(i as u32);
        }
        let users = self
            .user_features
            .into_iter()
            .map(|f| {
                let mut f = f.unwrap_or_default();
                for entry in &mut f.prior_shares {
                    entry.0 = remap[entry.0 as usize];
                }
                f.prior_shares.sort_unstable();
                f
            })
            .collect();
        Dataset {
            users: self.users,
            items: self.items,
            domains,
            observations,
            features: UserFeatureStore { users, has_prior_shares: self.has_prior_shares },
            domain_index,
            provenance,
        }
    }
}

/// Input file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Ndjson,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Ndjson => "ndjson",
            Format::Csv => "csv",
        }
    }

    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "ndjson" | "jsonl" => Some(Format::Ndjson),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ndjson" | "jsonl" => Ok(Format::Ndjson),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// Column mapping from logical fields to input column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub user: String,
    pub item: String,
    pub domain: String,
    pub arm: String,
    pub outcome: String,
    pub confounder: Option<String>,
    pub prior_shares: Option<String>,
    /// Separate per-user feature file, relative to the observation file's directory.
    pub users_file: Option<PathBuf>,
    /// Logical dense field name → column name.
    pub features: BTreeMap<String, String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            user: "user".into(),
            item: "item".into(),
            domain: "domain".into(),
            arm: "arm".into(),
            outcome: "outcome".into(),
            confounder: Some("confounder".into()),
            prior_shares: Some("prior_shares".into()),
            users_file: None,
            features: DenseField::ALL.iter().map(|f| (f.name().to_string(), f.name().to_string())).collect(),
        }
    }
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Schema> {
        let schema: Schema = toml::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn validate(&self) -> Result<()> {
        for name in self.features.keys() {
            if DenseField::from_name(name).is_none() {
                return Err(Error::Config(format!("unknown feature field {name:?} in schema")));
            }
        }
        Ok(())
    }

    fn feature_columns(&self) -> Vec<(DenseField, &str)> {
        self.features
            .iter()
            .filter_map(|(k, v)| DenseField::from_name(k).map(|f| (f, v.as_str())))
            .collect()
    }

    fn has_inline_features(&self) -> bool {
        self.users_file.is_none()
    }
}

/// Cell value abstraction over NDJSON and CSV rows.
trait Row {
    fn get(&self, column: &str) -> Option<Cell<'_>>;
}

enum Cell<'a> {
    Json(&'a Value),
    Text(&'a str),
}

impl Cell<'_> {
    fn is_empty(&self) -> bool {
        match self {
            Cell::Json(v) => v.is_null(),
            Cell::Text(s) => s.is_empty(),
        }
    }

    fn as_id(&self) -> Option<String> {
        match self {
            Cell::Json(Value::String(s)) => Some(s.clone()),
            Cell::Json(Value::Number(n)) => Some(n.to_string()),
            Cell::Text(s) if !s.is_empty() => Some((*s).to_string()),
            _ => None,
        }
    }

    fn as_text(&self) -> Option<String> {
        match self {
            Cell::Json(Value::String(s)) => Some(s.clone()),
            Cell::Json(Value::Number(n)) => Some(n.to_string()),
            Cell::Json(Value::Bool(b)) => Some(b.to_string()),
            Cell::Text(s) => Some((*s).to_string()),
            _ => None,
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Json(Value::Number(n)) => n.as_f64(),
            Cell::Json(Value::Bool(b)) => Some(f64::from(u8::from(*b))),
            Cell::Json(Value::String(s)) => s.trim().parse().ok(),
            Cell::Text(s) => match s.trim() {
                "true" => Some(1.0),
                "false" => Some(0.0),
                t => t.parse().ok(),
            },
            _ => None,
        }
    }
}

impl Row for serde_json::Map<String, Value> {
    fn get(&self, column: &str) -> Option<Cell<'_>> {
        serde_json::Map::get(self, column).map(Cell::Json)
    }
}

struct CsvRow<'a> {
    header: &'a HashMap<String, usize>,
    record: &'a csv::StringRecord,
}

impl Row for CsvRow<'_> {
    fn get(&self, column: &str) -> Option<Cell<'_>> {
        let i = *self.header.get(column)?;
        self.record.get(i).map(Cell::Text)
    }
}

fn required_id(row: &dyn Row, column: &str, line: usize) -> Result<String> {
    match row.get(column) {
        None => Err(missing(column, line)),
        Some(c) => c.as_id().ok_or_else(|| Error::MalformedRow {
            row: line,
            reason: format!("field {column:?} is not a valid identifier"),
        }),
    }
}

fn missing(column: &str, line: usize) -> Error {
    if line <= 1 {
        Error::MissingColumn(column.to_string())
    } else {
        Error::MalformedRow { row: line, reason: format!("missing required field {column:?}") }
    }
}

fn parse_observation(row: &dyn Row, schema: &Schema, line: usize) -> Result<ObservationRecord> {
    let user_id = required_id(row, &schema.user, line)?;
    let item_id = required_id(row, &schema.item, line)?;
    let domain_id = required_id(row, &schema.domain, line)?;
    let arm_label = row
        .get(&schema.arm)
        .ok_or_else(|| missing(&schema.arm, line))?
        .as_text()
        .ok_or_else(|| Error::MalformedRow { row: line, reason: "arm is not a string".into() })?;
    let arm = arm_label.parse().map_err(|label| Error::UnknownArm { row: line, label })?;
    let outcome_cell = row.get(&schema.outcome).ok_or_else(|| missing(&schema.outcome, line))?;
    let outcome = match outcome_cell.as_f64() {
        Some(0.0) => false,
        Some(1.0) => true,
        _ => {
            return Err(Error::OutcomeOutOfRange {
                row: line,
                value: outcome_cell.as_text().unwrap_or_else(|| "null".into()),
            })
        }
    };
    let confounder = match schema.confounder.as_deref().and_then(|c| row.get(c)) {
        Some(cell) if !cell.is_empty() => Some(cell.as_f64().filter(|v| v.is_finite()).ok_or_else(|| {
            Error::MalformedRow { row: line, reason: "confounder is not a finite number".into() }
        })?),
        _ => None,
    };
    Ok(ObservationRecord { user_id, item_id, domain_id, arm, outcome, confounder })
}

fn parse_gender(cell: &Cell<'_>) -> Option<f64> {
    if let Some(v) = cell.as_f64() {
        return (v == 0.0 || v == 1.0 || v == 2.0).then_some(v);
    }
    let text = cell.as_text()?;
    GENDER_LEVELS.iter().position(|l| *l == text.to_ascii_lowercase()).map(|i| i as f64)
}

/// Parses the feature part of a row. Returns `None` prior shares when the
/// column is absent.
fn parse_features(
    row: &dyn Row,
    schema: &Schema,
    line: usize,
    builder: &mut DatasetBuilder,
) -> Result<(UserFeatures, bool)> {
    let mut features = UserFeatures::default();
    for (field, column) in schema.feature_columns() {
        let Some(cell) = row.get(column) else { continue };
        if cell.is_empty() {
            continue;
        }
        let value = if field == DenseField::Gender {
            parse_gender(&cell)
        } else {
            cell.as_f64()
        };
        let bad = |why: &str| Error::MalformedRow { row: line, reason: format!("field {:?} {why}", field.name()) };
        let value = value.ok_or_else(|| bad("is not a valid value"))?;
        if !value.is_finite() || value < 0.0 {
            return Err(bad("must be a finite nonnegative number"));
        }
        if field.is_count() && value.fract() != 0.0 {
            return Err(bad("must be an integer count"));
        }
        if field == DenseField::ProfilePicture && value > 1.0 {
            return Err(bad("must be 0 or 1"));
        }
        features.set(field, value);
    }
    let mut has_prior = false;
    if let Some(cell) = schema.prior_shares.as_deref().and_then(|c| row.get(c)) {
        has_prior = true;
        let bad = |why: String| Error::MalformedRow { row: line, reason: format!("prior_shares: {why}") };
        let mut entries: Vec<(String, f64)> = Vec::new();
        match cell {
            Cell::Json(Value::Object(map)) => {
                for (k, v) in map {
                    let c = v.as_f64().ok_or_else(|| bad(format!("count for {k:?} is not a number")))?;
                    entries.push((k.clone(), c));
                }
            }
            Cell::Json(Value::Null) => {}
            Cell::Json(Value::String(s)) => entries = parse_share_list(s).map_err(bad)?,
            Cell::Text(s) => entries = parse_share_list(s).map_err(bad)?,
            Cell::Json(_) => return Err(bad("expected an object".into())),
        }
        for (domain, count) in entries {
            if !(count >= 0.0 && count.fract() == 0.0 && count <= f64::from(u32::MAX)) {
                return Err(bad(format!("count for {domain:?} must be a nonnegative integer")));
            }
            if count > 0.0 {
                let d = builder.domain(&domain);
                features.prior_shares.push((d, count as u32));
            }
        }
    }
    Ok((features, has_prior))
}

fn parse_share_list(s: &str) -> std::result::Result<Vec<(String, f64)>, String> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (d, c) = pair.rsplit_once(':').ok_or_else(|| format!("entry {pair:?} is not domain:count"))?;
            let c: f64 = c.trim().parse().map_err(|_| format!("entry {pair:?} has a bad count"))?;
            Ok((d.trim().to_string(), c))
        })
        .collect()
}

/// Iterates rows of an NDJSON or CSV file, calling `f(line_number, row)`.
fn for_each_row(path: &Path, format: Format, mut f: impl FnMut(usize, &dyn Row) -> Result<()>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Ndjson => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line_no = i + 1;
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: Value = serde_json::from_str(&line)
                    .map_err(|e| Error::MalformedRow { row: line_no, reason: e.to_string() })?;
                let Value::Object(map) = value else {
                    return Err(Error::MalformedRow { row: line_no, reason: "expected a JSON object".into() });
                };
                f(line_no, &map)?;
            }
        }
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
            let header: HashMap<String, usize> =
                reader.headers()?.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
            let mut record = csv::StringRecord::new();
            let mut line_no = 1;
            loop {
                match reader.read_record(&mut record) {
                    Ok(true) => {}
                    Ok(false) => break,
                    Err(e) => return Err(Error::MalformedRow { row: line_no + 1, reason: e.to_string() }),
                }
                line_no += 1;
                f(line_no, &CsvRow { header: &header, record: &record })?;
            }
        }
    }
    Ok(())
}

fn csv_header(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    Ok(reader.headers()?.iter().map(str::to_string).collect())
}

/// Reads and validates an observation file (plus an optional users file).
pub fn ingest(path: &Path, format: Format, schema: &Schema) -> Result<Dataset> {
    if format == Format::Csv {
        let header = csv_header(path)?;
        for col in [&schema.user, &schema.item, &schema.domain, &schema.arm, &schema.outcome] {
            if !header.iter().any(|h| h == col) {
                return Err(Error::MissingColumn(col.clone()));
            }
        }
    }

    let mut builder = DatasetBuilder::new();
    let mut user_table: HashMap<String, (usize, UserFeatures)> = HashMap::new();
    if let Some(users_file) = &schema.users_file {
        let users_path = path.parent().unwrap_or(Path::new(".")).join(users_file);
        let users_format = Format::from_path(&users_path).unwrap_or(format);
        for_each_row(&users_path, users_format, |line, row| {
            let id = required_id(row, &schema.user, line)?;
            let (features, has_prior) = parse_features(row, schema, line, &mut builder)?;
            if has_prior {
                builder.mark_prior_shares();
            }
            if user_table.insert(id.clone(), (line, features)).is_some() {
                return Err(Error::MalformedRow { row: line, reason: format!("duplicate user {id:?} in users file") });
            }
            Ok(())
        })?;
    }

    for_each_row(path, format, |line, row| {
        let record = parse_observation(row, schema, line)?;
        if schema.has_inline_features() {
            let (features, has_prior) = parse_features(row, schema, line, &mut builder)?;
            if has_prior {
                builder.mark_prior_shares();
            }
            builder.set_user_features(line, &record.user_id, features)?;
        } else if let Some((uline, features)) = user_table.get(&record.user_id) {
            builder.set_user_features(*uline, &record.user_id, features.clone())?;
        }
        builder.push(line, record)
    })?;

    let dataset = builder.build(Provenance { source: path.display().to_string(), ground_truth: None });
    let summary = validate_arms(&dataset);
    log::info!(
        "ingested {} rows from {}: exposed={} exp_control={} necg={} domains={}",
        dataset.len(),
        path.display(),
        summary.total.exposed,
        summary.total.exp_control,
        summary.total.necg,
        summary.per_domain.len()
    );
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmCounts {
    pub exposed: usize,
    pub exp_control: usize,
    pub necg: usize,
}

impl ArmCounts {
    fn add(&mut self, arm: Arm) {
        match arm {
            Arm::Exposed => self.exposed += 1,
            Arm::ExperimentalControl => self.exp_control += 1,
            Arm::NecgUnexposed => self.necg += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.exposed + self.exp_control + self.necg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainArmCounts {
    pub domain_id: String,
    pub counts: ArmCounts,
    /// No exposed pairs: the domain carries zero weight in pooled estimates.
    pub zero_weight: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub total: ArmCounts,
    pub per_domain: Vec<DomainArmCounts>,
}

impl ArmSummary {
    pub fn zero_weight_domains(&self) -> impl Iterator<Item = &str> {
        self.per_domain.iter().filter(|d| d.zero_weight).map(|d| d.domain_id.as_str())
    }
}

/// Counts observations per arm, overall and per domain. Domains of the
/// vocabulary without any observation are omitted.
pub fn validate_arms(dataset: &Dataset) -> ArmSummary {
    let mut total = ArmCounts::default();
    let mut per_domain = Vec::new();
    for d in 0..dataset.n_domains() as u32 {
        let rows = dataset.domain_rows(d);
        if rows.is_empty() {
            continue;
        }
        let mut counts = ArmCounts::default();
        for &r in rows {
            counts.add(dataset.observations()[r as usize].arm);
        }
        total.exposed += counts.exposed;
        total.exp_control += counts.exp_control;
        total.necg += counts.necg;
        per_domain.push(DomainArmCounts {
            domain_id: dataset.domain_id(d).to_string(),
            counts,
            zero_weight: counts.exposed == 0,
        });
    }
    ArmSummary { total, per_domain }
}

/// Writes the observation table in `format`. Feature columns go to a separate
/// users file (see [`write_users`]).
pub fn write_observations(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    let schema = Schema::default();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let with_confounder = dataset.observations().iter().any(|o| o.confounder.is_some());
    match format {
        Format::Ndjson => {
            use std::io::Write;
            for i in 0..dataset.len() {
                let r = dataset.record(i);
                let mut map = serde_json::Map::new();
                map.insert(schema.user.clone(), Value::String(r.user_id));
                map.insert(schema.item.clone(), Value::String(r.item_id));
                map.insert(schema.domain.clone(), Value::String(r.domain_id));
                map.insert(schema.arm.clone(), Value::String(r.arm.label().into()));
                map.insert(schema.outcome.clone(), Value::from(u8::from(r.outcome)));
                if let Some(c) = r.confounder {
                    map.insert("confounder".into(), Value::from(c));
                }
                serde_json::to_writer(&mut out, &map)?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            out.flush().map_err(|e| Error::io(path, e))?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let mut header = vec!["user", "item", "domain", "arm", "outcome"];
            if with_confounder {
                header.push("confounder");
            }
            w.write_record(&header)?;
            for i in 0..dataset.len() {
                let r = dataset.record(i);
                let mut rec = vec![
                    r.user_id,
                    r.item_id,
                    r.domain_id,
                    r.arm.label().to_string(),
                    u8::from(r.outcome).to_string(),
                ];
                if with_confounder {
                    rec.push(r.confounder.map(|c| c.to_string()).unwrap_or_default());
                }
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Writes one row per user with dense features and prior shares.
pub fn write_users(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    let store = dataset.features();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    match format {
        Format::Ndjson => {
            use std::io::Write;
            for (id, f) in dataset.users().iter().zip(&store.users) {
                let mut map = serde_json::Map::new();
                map.insert("user".into(), Value::String(id.clone()));
                for field in DenseField::ALL {
                    if let Some(v) = f.get(field) {
                        map.insert(field.name().into(), Value::from(v));
                    }
                }
                if store.has_prior_shares {
                    let shares: serde_json::Map<String, Value> = f
                        .prior_shares
                        .iter()
                        .map(|&(d, c)| (dataset.domain_id(d).to_string(), Value::from(c)))
                        .collect();
                    map.insert("prior_shares".into(), Value::Object(shares));
                }
                serde_json::to_writer(&mut out, &map)?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            out.flush().map_err(|e| Error::io(path, e))?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let mut header: Vec<&str> = vec!["user"];
            header.extend(DenseField::ALL.iter().map(|f| f.name()));
            if store.has_prior_shares {
                header.push("prior_shares");
            }
            w.write_record(&header)?;
            for (id, f) in dataset.users().iter().zip(&store.users) {
                let mut rec = vec![id.clone()];
                rec.extend(DenseField::ALL.iter().map(|&fl| f.get(fl).map(|v| v.to_string()).unwrap_or_default()));
                if store.has_prior_shares {
                    let s: Vec<String> =
                        f.prior_shares.iter().map(|&(d, c)| format!("{}:{}", dataset.domain_id(d), c)).collect();
                    rec.push(s.join(";"));
                }
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}
