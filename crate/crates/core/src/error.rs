use std::path::PathBuf;

use thiserror::Error;

use crate::inference::FitResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cyclic pedigree: {0}")]
    CyclicPedigree(String),
    #[error("unknown parent `{parent}` of individual `{child}`")]
    UnknownParent { child: String, parent: String },
    #[error("duplicate individual `{0}`")]
    DuplicateIndividual(String),

    #[error("invalid cut points: {0}")]
    InvalidCutPoints(String),
    #[error("no events for quantile cut points")]
    NoEventsForQuantile,
    #[error("time exceeds cut points: individual `{id}` observed until {time}")]
    TimeExceedsCutPoints { id: String, time: f64 },
    #[error("event at time zero for individual `{0}`")]
    EventAtTimeZero(String),
    #[error("invalid record for individual `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("column not found: `{0}`")]
    ColumnNotFound(String),
    #[error("unseen cluster level `{level}` in component `{component}`")]
    UnseenClusterLevel { component: String, level: String },
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("hazard probability ≥ 1 (η = {eta})")]
    HazardProbabilityAtLeastOne { eta: f64 },
    #[error("no events in baseline level {0}")]
    EmptyBaselineLevel(String),

    #[error("MME not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("did not converge after {} iterations", .0.convergence.iterations)]
    DidNotConverge(Box<FitResult>),
    #[error("insufficient residual degrees of freedom for trait {0}")]
    InsufficientDf(usize),
    #[error("curvature not evaluable: {0}")]
    CurvatureNotEvaluable(String),

    #[error("time out of range: {0}")]
    TimeOutOfRange(f64),
    #[error("invalid hazard for heritability: {0}")]
    InvalidHazard(f64),
    #[error("invalid cumulative hazard: {0}")]
    InvalidCumulativeHazard(f64),
    #[error("median survival time undefined: survival never drops to 0.5")]
    MedianUndefined,
    #[error("correlation undefined: zero variance")]
    CorrelationUndefined,

    #[error("truth yields invalid probability {prob} for individual {individual}")]
    InvalidTruthProbability { individual: usize, prob: f64 },

    #[error("missing prerequisite `{}`: {hint}", .path.display())]
    MissingPrerequisite { path: PathBuf, hint: String },

    #[error("I/O error on `{}`: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
