use thiserror::Error;

use crate::aggregation::AggregatedState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("combination {0:?} is not a clique of the current state")]
    NotAClique(Vec<usize>),

    #[error("no stored packet has a positive lifetime")]
    AllExpired,

    #[error("storage mode does not match the requested operation")]
    ModeMismatch,

    #[error("empty combination: every coefficient is zero")]
    EmptyCombination,

    #[error("coefficient vector has length {coefficients}, expected {packets}")]
    CoefficientLength { packets: usize, coefficients: usize },

    #[error("aggregated state {0} has no detailed preimage")]
    Unrepresentable(AggregatedState),

    #[error("aggregated state {0} is outside the enumerated state space")]
    UnknownState(AggregatedState),

    #[error("action {action} is not feasible in {state}")]
    InfeasibleAction { state: AggregatedState, action: String },

    #[error("transition model holds no data")]
    NoData,

    #[error("slice {0} has more than one switch point")]
    AmbiguousSlice(String),

    #[error("policies belong to different aggregation schemes")]
    SchemeMismatch,

    #[error("state space too large for exact enumeration: {0}")]
    TooLarge(String),

    #[error("no recurrent class is reachable from the start state")]
    DegeneratePolicy,

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
