//! Peer-effect estimation by propensity-score stratification.
//!
//! A dataset pairs users with items (grouped by domain) in three arms:
//! exposed, a randomized holdout of would-be-exposed pairs, and a
//! non-experimental control group (NECG) of unexposed pairs. The holdout
//! gives an experimental benchmark; observational estimators use only the
//! NECG and are compared against it.
//!
//! Pipeline: [`data_model`] → [`featurize`] → [`ridge_logit`] → [`stratify`]
//! → [`estimators`] → [`bias_metrics`], with [`bootstrap`] for intervals and
//! [`simulator`] for data with known truth.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bias_metrics;
pub mod bootstrap;
pub mod data_model;
pub mod error;
pub mod estimators;
pub mod featurize;
pub mod float_serde;
pub mod ridge_logit;
pub mod simulator;
pub mod stratify;

pub use bias_metrics::{bias_reduction, delta_percent_of_max, rr_percent_bias, BiasReport, BiasRow};
pub use bootstrap::{bootstrap_ci, BootstrapConfig, BootstrapResult, Interval, VarianceRule, WeightScheme};
pub use data_model::{ingest, Arm, Dataset, Format, Schema};
pub use error::{Error, ErrorKind, Result};
pub use estimators::{
    estimate_adjusted, estimate_experimental, estimate_naive, estimate_p1, AdjustedPipeline, EffectEstimate,
    Estimator, ScoreMode,
};
pub use featurize::{build_design, DesignMatrix, ModelSpec, SpecName};
pub use ridge_logit::{fit, predict_scores, FitOptions, PenaltyScale, PropensityFit, ScoreVector};
pub use simulator::{emit, generate, GroundTruth, SimConfig};
pub use stratify::{assign_strata, strata_p0, StrataAssignment, StrataPolicy};
