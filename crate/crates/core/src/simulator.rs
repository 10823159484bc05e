//! Synthetic confounded peer-exposure data with exactly known truth.
//!
//! Each user has latent topic preferences `θ` and an activity level; each
//! domain has topic loadings `φ` and a popularity. Their combination
//!
//! ```text
//! c = ⟨θ, φ⟩ + ε + activity_weight · activity
//! ```
//!
//! raises both the chance of being exposed (scaled by `homophily`) and the
//! baseline chance of sharing, which is what confounds the naive estimate.
//! Prior-period shares and activity counts are noisy proxies of `c`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    write_observations, write_users, Arm, Dataset, DatasetBuilder, DenseField, Format, ObservationRecord,
    Provenance, Schema, UserFeatures,
};
use crate::error::{Error, Result};
use crate::ridge_logit::{logistic, logit};

/// Link from the linear predictor to the exposure probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureLink {
    #[default]
    Logistic,
    /// Student-t with 3 degrees of freedom; misspecified for the logistic fit.
    StudentT3,
}

/// Student-t(3) CDF in closed form.
pub fn student_t3_cdf(t: f64) -> f64 {
    let u = t / 3f64.sqrt();
    0.5 + (u / (1.0 + u * u) + u.atan()) / std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_domains: usize,
    pub n_items_per_domain: usize,
    pub topics: usize,
    /// Scale of the confounder in the exposure link; 0 removes confounding.
    pub homophily: f64,
    /// Scale of the confounder in the baseline sharing link.
    pub interest: f64,
    /// Multiplier on the sharing probability when exposed.
    pub peer_effect: f64,
    pub base_exposure: f64,
    pub base_share: f64,
    /// Share of would-be-exposed pairs held out as experimental controls.
    pub holdout: f64,
    /// Share of unexposed pairs sampled into the NECG.
    pub necg_rate: f64,
    pub idiosyncratic_sd: f64,
    pub activity_weight: f64,
    pub popularity_sd: f64,
    /// Expected prior-period shares per unit of `exp(popularity + affinity)`.
    pub prior_rate: f64,
    pub prior_window: f64,
    /// Loading of activity on prior sharing.
    pub prior_activity: f64,
    /// Fraction of domains with no prior-period activity at all.
    pub inactive_fraction: f64,
    pub link: ExposureLink,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            n_users: 20_000,
            n_domains: 50,
            n_items_per_domain: 2,
            topics: 8,
            homophily: 1.0,
            interest: 0.8,
            peer_effect: 4.0,
            base_exposure: 0.02,
            base_share: 0.003,
            holdout: 0.5,
            necg_rate: 0.02,
            idiosyncratic_sd: 0.7,
            activity_weight: 0.5,
            popularity_sd: 0.5,
            prior_rate: 1.0,
            prior_window: 1.0,
            prior_activity: 0.3,
            inactive_fraction: 0.0,
            link: ExposureLink::Logistic,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<SimConfig> {
        let c: SimConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<SimConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_domains == 0 || self.n_items_per_domain == 0 || self.topics == 0 {
            return bad("n_users, n_domains, n_items_per_domain and topics must be positive".into());
        }
        for (name, v) in [
            ("base_exposure", self.base_exposure),
            ("base_share", self.base_share),
            ("holdout", self.holdout),
            ("necg_rate", self.necg_rate),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.peer_effect >= 1.0) {
            return bad(format!("peer_effect must be at least 1, got {}", self.peer_effect));
        }
        if !(self.homophily >= 0.0) {
            return bad(format!("homophily must be nonnegative, got {}", self.homophily));
        }
        if !(0.0..=1.0).contains(&self.inactive_fraction) {
            return bad(format!("inactive_fraction must lie in [0, 1], got {}", self.inactive_fraction));
        }
        for (name, v) in [
            ("interest", self.interest),
            ("idiosyncratic_sd", self.idiosyncratic_sd),
            ("activity_weight", self.activity_weight),
            ("popularity_sd", self.popularity_sd),
            ("prior_rate", self.prior_rate),
            ("prior_window", self.prior_window),
            ("prior_activity", self.prior_activity),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    fn domain_width(&self) -> usize {
        (self.n_domains.saturating_sub(1)).to_string().len().max(2)
    }

    pub fn domain_id(&self, d: usize) -> String {
        format!("d{:0w$}", d, w = self.domain_width())
    }

    pub fn item_id(&self, d: usize, k: usize) -> String {
        let w = (self.n_items_per_domain.saturating_sub(1)).to_string().len().max(2);
        format!("{}_i{:0w$}", self.domain_id(d), k)
    }
}

/// Exact expected outcome rates of one domain, summed over its pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainTruth {
    pub domain_id: String,
    pub n_exposed: usize,
    pub n_exp_control: usize,
    pub n_necg: usize,
    pub inactive: bool,
    /// Σ p⁽⁰⁾ over realized exposed pairs.
    pub sum_p0: f64,
    /// Σ p⁽¹⁾ over realized exposed pairs.
    pub sum_p1: f64,
}

/// Mean generating probabilities over the realized exposed pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p0: f64,
    pub p1: f64,
    pub rr: f64,
    pub delta: f64,
    pub n_exposed: usize,
    /// Pairs whose exposed probability hit the cap of 1.
    pub capped_pairs: usize,
    pub domains: Vec<DomainTruth>,
}

impl GroundTruth {
    fn from_domains(domains: Vec<DomainTruth>, capped_pairs: usize) -> Self {
        let (p0, p1, n) = Self::pool(domains.iter());
        GroundTruth { p0, p1, rr: p1 / p0, delta: p1 - p0, n_exposed: n, capped_pairs, domains }
    }

    fn pool<'a>(it: impl Iterator<Item = &'a DomainTruth>) -> (f64, f64, usize) {
        let (mut s0, mut s1, mut n) = (0.0, 0.0, 0);
        for d in it {
            s0 += d.sum_p0;
            s1 += d.sum_p1;
            n += d.n_exposed;
        }
        (s0 / n as f64, s1 / n as f64, n)
    }

    /// `(p0, p1)` over the exposed pairs of the listed domains.
    pub fn restricted(&self, domain_ids: &[String]) -> Option<(f64, f64)> {
        let (p0, p1, n) = Self::pool(self.domains.iter().filter(|d| domain_ids.contains(&d.domain_id)));
        (n > 0).then_some((p0, p1))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes") + "\n"
    }
}

struct DomainParams {
    loading: Vec<f64>,
    popularity: f64,
    inactive: bool,
}

struct UserDraw {
    features: UserFeatures,
    /// `(domain, item, arm, outcome, confounder, p0, p1)`.
    pairs: Vec<(u32, u32, Arm, bool, f64, f64, f64)>,
    capped: usize,
}

fn mix(seed: u64, index: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

fn binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    Binomial::new(n, p.clamp(0.0, 1.0)).expect("valid binomial").sample(rng)
}

fn draw_domains(config: &SimConfig) -> Vec<DomainParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0, 1));
    let scale = 1.0 / (config.topics as f64).sqrt();
    let mut domains: Vec<DomainParams> = (0..config.n_domains)
        .map(|_| DomainParams {
            loading: (0..config.topics).map(|_| normal(&mut rng) * scale).collect(),
            popularity: normal(&mut rng) * config.popularity_sd,
            inactive: false,
        })
        .collect();
    let n_inactive = (config.inactive_fraction * config.n_domains as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.n_domains).collect();
    order.shuffle(&mut rng);
    for &d in &order[..n_inactive] {
        domains[d].inactive = true;
    }
    domains
}

fn draw_user(config: &SimConfig, domains: &[DomainParams], user: usize) -> UserDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, user as u64, 2));
    let theta: Vec<f64> = (0..config.topics).map(|_| normal(&mut rng)).collect();
    let activity = normal(&mut rng);

    let mut f = UserFeatures::default();
    let age = (35.0 + 8.0 * theta[0] + 6.0 * normal(&mut rng)).round().clamp(13.0, 90.0);
    f.set(DenseField::Age, age);
    let male = theta.get(1).copied().unwrap_or(0.0);
    let gender = if rng.random_bool(0.02) {
        2.0
    } else if rng.random_bool(logistic(0.8 * male)) {
        1.0
    } else {
        0.0
    };
    f.set(DenseField::Gender, gender);
    let friends = poisson(&mut rng, 200.0 * (0.5 * activity).exp());
    f.set(DenseField::FriendCount, friends as f64);
    f.set(DenseField::FriendsInitiated, binomial(&mut rng, friends, logistic(0.3 * activity)) as f64);
    f.set(DenseField::TenureDays, binomial(&mut rng, 3000, logistic(0.5 * activity)) as f64);
    f.set(DenseField::ProfilePicture, f64::from(u8::from(rng.random_bool(logistic(2.0 + activity)))));
    let engaged = logistic(activity);
    f.set(DenseField::DaysActive30, binomial(&mut rng, 30, engaged) as f64);
    f.set(DenseField::DaysActive91, binomial(&mut rng, 91, engaged) as f64);
    f.set(DenseField::DaysActive182, binomial(&mut rng, 182, engaged) as f64);
    let level = activity.exp();
    f.set(DenseField::ActionCount, poisson(&mut rng, 500.0 * level) as f64);
    f.set(DenseField::PostCount, poisson(&mut rng, 20.0 * level) as f64);
    f.set(DenseField::CommentCount, poisson(&mut rng, 50.0 * level) as f64);
    f.set(DenseField::LikeCount, poisson(&mut rng, 200.0 * level) as f64);
    f.set(DenseField::Shares1m, poisson(&mut rng, 5.0 * level) as f64);

    let exp_intercept = logit(config.base_exposure);
    let share_intercept = logit(config.base_share);
    let mut pairs = Vec::new();
    let mut capped = 0;
    for (d, dom) in domains.iter().enumerate() {
        let affinity: f64 =
            theta.iter().zip(&dom.loading).map(|(t, l)| t * l).sum::<f64>() + config.idiosyncratic_sd * normal(&mut rng);
        let confounder = affinity + config.activity_weight * activity;
        let prior = if dom.inactive {
            0
        } else {
            let mean = config.prior_rate
                * config.prior_window
                * (dom.popularity + affinity + config.prior_activity * activity).exp();
            poisson(&mut rng, mean)
        };
        if prior > 0 {
            f.prior_shares.push((d as u32, prior.min(u64::from(u32::MAX)) as u32));
        }
        let eta = exp_intercept + dom.popularity + config.homophily * confounder;
        let p_exposed = match config.link {
            ExposureLink::Logistic => logistic(eta),
            ExposureLink::StudentT3 => student_t3_cdf(eta),
        };
        let p0 = logistic(share_intercept + 0.5 * dom.popularity + config.interest * confounder);
        let raw_p1 = config.peer_effect * p0;
        let p1 = raw_p1.min(1.0);
        for k in 0..config.n_items_per_domain {
            let item = (d * config.n_items_per_domain + k) as u32;
            let arm = if rng.random_bool(p_exposed) {
                if raw_p1 > 1.0 {
                    capped += 1;
                }
                if rng.random_bool(config.holdout) {
                    Arm::ExperimentalControl
                } else {
                    Arm::Exposed
                }
            } else if rng.random_bool(config.necg_rate) {
                Arm::NecgUnexposed
            } else {
                continue;
            };
            let outcome = rng.random_bool(if arm == Arm::Exposed { p1 } else { p0 });
            pairs.push((d as u32, item, arm, outcome, confounder, p0, p1));
        }
    }
    let unique = f.prior_shares.len() as f64;
    f.set(DenseField::UniqueDomains6m, unique);
    UserDraw { features: f, pairs, capped }
}

/// Draws a dataset and its ground truth.
pub fn generate(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let domains = draw_domains(config);
    let draws: Vec<UserDraw> = (0..config.n_users).into_par_iter().map(|u| draw_user(config, &domains, u)).collect();

    let mut truth: Vec<DomainTruth> = (0..config.n_domains)
        .map(|d| DomainTruth { domain_id: config.domain_id(d), inactive: domains[d].inactive, ..Default::default() })
        .collect();
    let would_be_exposed: usize =
        draws.iter().flat_map(|u| &u.pairs).filter(|p| p.2 != Arm::NecgUnexposed).count();
    let capped: usize = draws.iter().map(|u| u.capped).sum();
    if capped as f64 > 0.01 * would_be_exposed.max(1) as f64 {
        return Err(Error::InfeasibleRates(format!(
            "exposed sharing probability capped at 1 for {capped} of {would_be_exposed} exposed pairs"
        )));
    }

    let mut b = DatasetBuilder::new();
    b.mark_prior_shares();
    let domain_ids: Vec<String> = (0..config.n_domains).map(|d| config.domain_id(d)).collect();
    for id in &domain_ids {
        b.domain(id);
    }
    let item_ids: Vec<String> = (0..config.n_domains)
        .flat_map(|d| (0..config.n_items_per_domain).map(move |k| (d, k)))
        .map(|(d, k)| config.item_id(d, k))
        .collect();
    let width = (config.n_users.saturating_sub(1)).to_string().len();
    let mut row = 0;
    for (u, draw) in draws.into_iter().enumerate() {
        if draw.pairs.is_empty() {
            continue;
        }
        let user_id = format!("u{u:0width$}");
        b.set_user_features(row + 1, &user_id, draw.features)?;
        for (d, item, arm, outcome, confounder, p0, p1) in draw.pairs {
            row += 1;
            let t = &mut truth[d as usize];
            match arm {
                Arm::Exposed => {
                    t.n_exposed += 1;
                    t.sum_p0 += p0;
                    t.sum_p1 += p1;
                }
                Arm::ExperimentalControl => t.n_exp_control += 1,
                Arm::NecgUnexposed => t.n_necg += 1,
            }
            b.push(
                row,
                ObservationRecord {
                    user_id: user_id.clone(),
                    item_id: item_ids[item as usize].clone(),
                    domain_id: domain_ids[d as usize].clone(),
                    arm,
                    outcome,
                    confounder: Some(confounder),
                },
            )?;
        }
    }
    let truth = GroundTruth::from_domains(truth, capped);
    if truth.n_exposed == 0 {
        return Err(Error::InfeasibleRates("no exposed pairs were drawn".into()));
    }
    Ok(b.build(Provenance { source: format!("simulator seed {}", config.seed), ground_truth: Some(truth) }))
}

/// Paths written by [`emit`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub observations: PathBuf,
    pub users: PathBuf,
    pub schema: PathBuf,
    pub ground_truth: Option<PathBuf>,
}

/// Writes the observation table, the user table, a schema that ties them
/// together and, when present, the ground-truth sidecar.
pub fn emit(dataset: &Dataset, dir: &Path, format: Format) -> Result<EmittedFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = format.extension();
    let observations = dir.join(format!("observations.{ext}"));
    let users = dir.join(format!("users.{ext}"));
    write_observations(dataset, &observations, format)?;
    write_users(dataset, &users, format)?;
    let schema = Schema { users_file: Some(PathBuf::from(format!("users.{ext}"))), ..Schema::default() };
    let schema_path = dir.join("schema.toml");
    std::fs::write(&schema_path, schema.to_toml_string()).map_err(|e| Error::io(&schema_path, e))?;
    let ground_truth = match dataset.ground_truth() {
        Some(t) => {
            let p = dir.join("ground_truth.json");
            std::fs::write(&p, t.to_json()).map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };
    Ok(EmittedFiles { observations, users, schema: schema_path, ground_truth })
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::ingest;

    fn small() -> SimConfig {
        SimConfig { n_users: 800, n_domains: 6, ..SimConfig::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert!(a.content_eq(&b));
        assert_eq!(a.ground_truth(), b.ground_truth());
        let c = generate(&SimConfig { seed: 2, ..small() }).unwrap();
        assert!(!a.content_eq(&c));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| generate(&small()).unwrap());
        let b = three.install(|| generate(&small()).unwrap());
        assert!(a.content_eq(&b));
    }

    #[test]
    fn truth_is_consistent() {
        let ds = generate(&small()).unwrap();
        let t = ds.ground_truth().unwrap();
        assert_eq!(t.rr, t.p1 / t.p0);
        assert_eq!(t.delta, t.p1 - t.p0);
        let exposed = ds.observations().iter().filter(|o| o.arm == Arm::Exposed).count();
        assert_eq!(t.n_exposed, exposed);
        assert_eq!(t.domains.iter().map(|d| d.n_exposed).sum::<usize>(), exposed);
    }

    #[test]
    fn no_peer_effect_means_unit_rr() {
        let ds = generate(&SimConfig { peer_effect: 1.0, ..small() }).unwrap();
        let t = ds.ground_truth().unwrap();
        assert_eq!(t.rr, 1.0);
        assert_eq!(t.delta, 0.0);
    }

    #[test]
    fn cap_violation_is_an_error() {
        let c = SimConfig { base_share: 0.3, peer_effect: 5.0, ..small() };
        assert!(matches!(generate(&c), Err(Error::InfeasibleRates(_))));
    }

    #[test]
    fn inactive_domains_have_no_prior_shares() {
        let ds = generate(&SimConfig { inactive_fraction: 0.5, ..small() }).unwrap();
        let t = ds.ground_truth().unwrap();
        let counts = ds.features().prior_unique_sharers(ds.n_domains());
        let mut n_inactive = 0;
        for d in &t.domains {
            let ix = ds.domain_index_of(&d.domain_id).unwrap() as usize;
            if d.inactive {
                n_inactive += 1;
                assert_eq!(counts[ix], 0);
            } else {
                assert!(counts[ix] > 0);
            }
        }
        assert_eq!(n_inactive, 3);
    }

    #[test]
    fn prior_shares_track_confounder() {
        let ds = generate(&small()).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for o in ds.observations() {
            xs.push(o.confounder.unwrap());
            ys.push(f64::from(ds.user_features(o.user).prior_share_count(o.domain)).ln_1p());
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        assert!(cov > 0.0);
    }

    #[test]
    fn invalid_key_is_named() {
        let err = SimConfig::from_toml_str("n_users = 10\nhomophilly = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("homophilly"), "{err}");
        assert!(SimConfig::from_toml_str("holdout = 1.5").is_err());
        let c = SimConfig::from_toml_str(&small().to_toml_string()).unwrap();
        assert_eq!(c, small());
    }

    #[test]
    fn emit_and_ingest_round_trip() {
        let ds = generate(&SimConfig { n_users: 300, n_domains: 4, ..SimConfig::default() }).unwrap();
        for format in [Format::Ndjson, Format::Csv] {
            let dir = tempfile::tempdir().unwrap();
            let files = emit(&ds, dir.path(), format).unwrap();
            let schema = Schema::load(&files.schema).unwrap();
            let back = ingest(&files.observations, format, &schema).unwrap();
            assert!(back.content_eq(&ds), "{format:?}");
            let truth = load_ground_truth(files.ground_truth.as_ref().unwrap()).unwrap();
            assert_eq!(truth.rr, ds.ground_truth().unwrap().rr);
        }
    }

    #[test]
    fn t3_cdf() {
        assert_eq!(student_t3_cdf(0.0), 0.5);
        assert!((student_t3_cdf(3.182446) - 0.975).abs() < 1e-6);
        assert!((student_t3_cdf(-1.0) + student_t3_cdf(1.0) - 1.0).abs() < 1e-15);
    }
}
