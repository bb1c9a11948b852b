use thiserror::Error;

use crate::model::ValidationReport;
use crate::netsim::EndpointId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("lower bound {lower} exceeds upper bound {upper} at index {index}")]
    BoundOrder {
        index: usize,
        lower: f64,
        upper: f64,
    },

    #[error(
        "infeasible target for resource {resource}: need {lower_sum} <= {target} <= {upper_sum}"
    )]
    Infeasible {
        resource: usize,
        lower_sum: f64,
        target: f64,
        upper_sum: f64,
    },

    #[error("instance k={k} is invalid: {report}")]
    InvalidInstance { k: usize, report: ValidationReport },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),

    #[error("protocol failure: {0}")]
    Protocol(String),

    #[error("engine at k={current} cannot consume instance k={offered}")]
    StepOrder { current: usize, offered: usize },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("supply csv {path}, line {line}: {reason}")]
    SupplyCsv {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("record mismatch: iterate at k={iterate}, oracle at k={oracle}")]
    RecordMismatch { iterate: usize, oracle: usize },

    #[error("need at least {needed} records, got {got}")]
    InsufficientRecords { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
