use thiserror::Error;

/// Errors surfaced while validating data structures or running the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    // ---- input / data errors ----
    #[error("required column `{0}` is missing")]
    MissingColumn(String),
    #[error("unit {unit}: rows are overlapping, unordered, or degenerate near t = {at}")]
    NonChronologicalRows { unit: String, at: f64 },
    #[error("dataset contains no rows")]
    EmptyDataset,
    #[error("unit {unit}: duplicate event time {time} (collapse coincident events upstream)")]
    DuplicateEventTime { unit: String, time: f64 },
    #[error("unit {unit}: event time {time} lies outside the open observation window")]
    OutOfWindow { unit: String, time: f64 },
    #[error("field {field}: unknown category level `{level}`")]
    UnknownCategoryLevel { field: String, level: String },
    #[error("unit labels of the compensator set do not match the dataset ({detail})")]
    UnitMismatch { detail: String },
    #[error("student {student}: group label `{label}` has no score row")]
    UnmatchedGroupLabel { student: String, label: String },
    #[error("outcome is degenerate: only one class present")]
    DegenerateOutcome,
    #[error("need at least 2 clusters and one cluster with 2 units, got {clusters} clusters")]
    InsufficientClusters { clusters: usize },
    #[error("dataset has no observed events")]
    NoEvents,
    #[error("invalid value in {context}: {detail}")]
    InvalidValue { context: String, detail: String },

    // ---- numerical errors ----
    #[error("linear predictor overflow (|eta| = {eta:.1} > 700); rescale covariates")]
    NumericalOverflow { eta: f64 },
    #[error("solver did not converge within {max_iter} iterations (gradient sup-norm {grad_norm:.3e})")]
    NotConverged { max_iter: usize, grad_norm: f64 },
    #[error(
        "observed information is singular; likely monotone likelihood / separation in {context}"
    )]
    SingularInformation { context: String },
    #[error("design matrix is rank deficient (column `{column}` is redundant)")]
    RankDeficient { column: String },
    #[error("symmetric eigensolver failed to converge")]
    EigenFailure,
    #[error("intensity is negative at t = {at} (clamping disabled)")]
    NegativeIntensity { at: f64 },
    #[error("evaluation grid extends beyond the baseline domain [{lo}, {hi}]")]
    GridOutsideBaseline { lo: f64, hi: f64 },
    #[error("basis grid disagrees with curve grid ({detail})")]
    BasisMismatch { detail: String },
    #[error("component {component} not retained at level {level} (retained: {retained})")]
    ComponentOutOfRange {
        level: u8,
        component: usize,
        retained: usize,
    },

    // ---- plumbing ----
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error in {context}: `{value}`")]
    Parse { context: String, value: String },
}

/// Coarse classification used by callers that map errors to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed requests: bad column maps, out-of-range component indices, bad values.
    Usage,
    /// Structurally invalid or empty data.
    Data,
    /// Well-posed input on which the numerics failed.
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            MissingColumn(_) | NonChronologicalRows { .. } | EmptyDataset
            | DuplicateEventTime { .. } | OutOfWindow { .. } | UnknownCategoryLevel { .. }
            | UnitMismatch { .. } | UnmatchedGroupLabel { .. } | DegenerateOutcome
            | InsufficientClusters { .. } | NoEvents | Io(_) | Csv(_) | Parse { .. } => {
                ErrorCategory::Data
            }
            InvalidValue { .. } | ComponentOutOfRange { .. } | BasisMismatch { .. } => {
                ErrorCategory::Usage
            }
            NumericalOverflow { .. } | NotConverged { .. } | SingularInformation { .. }
            | RankDeficient { .. } | EigenFailure | NegativeIntensity { .. }
            | GridOutsideBaseline { .. } => ErrorCategory::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
