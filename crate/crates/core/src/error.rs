use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad classification used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("row {row}: outcome out of range ({value})")]
    OutcomeOutOfRange { row: usize, value: String },
    #[error("row {row}: duplicate (user, item) pair ({user}, {item})")]
    DuplicatePair { row: usize, user: String, item: String },
    #[error("row {row}: unknown arm label {label:?}")]
    UnknownArm { row: usize, label: String },
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: item {item:?} previously seen with domain {expected:?}, now {found:?}")]
    InconsistentDomain { row: usize, item: String, expected: String, found: String },
    #[error("row {row}: features for user {user:?} conflict with an earlier row")]
    InconsistentFeatures { row: usize, user: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain {0:?} has no exposed or no NECG observations")]
    EmptyDomain(String),
    #[error("spec {0} requires same-domain prior shares, but the feature store has no prior-share data")]
    MissingPriorShares(String),
    #[error("spec {0} requires the oracle confounder column, which the dataset does not carry")]
    MissingConfounder(String),
    #[error("labels are all {0}; a propensity model cannot be fit")]
    DegenerateLabels(&'static str),
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bias metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("no stratum contains NECG observations")]
    NoNecgInStrata,
    #[error("no exposed observations carry positive weight")]
    NoExposed,
    #[error("no experimental-control observations carry positive weight")]
    NoExperimentalControl,
    #[error("no NECG observations carry positive weight")]
    NoNecg,
    #[error("every domain is degenerate for spec {0}")]
    AllDomainsDegenerate(String),
    #[error("{dropped} of {total} bootstrap replicates were dropped (limit 10%)")]
    TooManyDroppedReplicates { dropped: usize, total: usize },
    #[error("infeasible simulation rates: {0}")]
    InfeasibleRates(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Toml(_) => ErrorKind::Usage,
            Error::DegenerateLabels(_)
            | Error::NonFinite { .. }
            | Error::AllDomainsDegenerate(_)
            | Error::TooManyDroppedReplicates { .. }
            | Error::DimensionMismatch(_)
            | Error::UndefinedMetric(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    /// True for errors that mean "this weighting left a required arm empty";
    /// the bootstrap drops such replicates instead of failing.
    pub fn is_zero_weight(&self) -> bool {
        matches!(
            self,
            Error::NoExposed
                | Error::NoExperimentalControl
                | Error::NoNecg
                | Error::NoNecgInStrata
                | Error::AllDomainsDegenerate(_)
        )
    }
}
