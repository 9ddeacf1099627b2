use crate::density::SeriesReport;
use crate::model::FitResult;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TweedieError>;

#[derive(Debug, Clone, Error)]
pub enum TweedieError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("linear predictor overflow at row {row} (|eta| = {eta:.3e})")]
    NumericOverflow { row: usize, eta: f64 },

    #[error("support violation at index {index}: {rule}")]
    SupportViolation { index: usize, rule: String },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("density series did not converge after {} terms", .0.terms_used)]
    SeriesNotConverged(SeriesReport),

    #[error("catastrophic cancellation in alternating density series (|sum| / max term = {ratio:.3e})")]
    CatastrophicCancellation { ratio: f64, report: SeriesReport },

    #[error("density evaluation failed at row {row}: {source}")]
    AtRow {
        row: usize,
        #[source]
        source: Box<TweedieError>,
    },

    #[error("maximum number of evaluations ({0}) reached")]
    MaxEvaluations(usize),

    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("numerical derivative probes leave the stable density region: {0}")]
    DensityRegionUnstable(String),

    #[error("no convergence after {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        partial: Option<Box<FitResult>>,
    },

    #[error("unsupported power {0} for simulation")]
    UnsupportedPower(f64),

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("insufficient converged replicates: {got} (need at least {need})")]
    InsufficientReplicates { got: usize, need: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl TweedieError {
    /// Strips any `AtRow` wrappers.
    pub fn root(&self) -> &TweedieError {
        match self {
            TweedieError::AtRow { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for TweedieError {
    fn from(e: std::io::Error) -> Self {
        TweedieError::Io(e.to_string())
    }
}

impl From<csv::Error> for TweedieError {
    fn from(e: csv::Error) -> Self {
        TweedieError::InvalidInput(e.to_string())
    }
}
