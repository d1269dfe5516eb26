//! Error types shared across the crate.

use crate::model::Finding;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad threshold, malformed ranges, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset loading failed; every offending row is reported as a finding.
    #[error("dataset load failed with {} finding(s); first: {}", .0.len(), first_message(.0))]
    Load(Vec<Finding>),

    /// An annotator shares no control patches with the anchor.
    #[error("no evidence: annotator {annotator_id} shares no control patches with the anchor")]
    NoEvidence { annotator_id: String },

    /// The input admits no meaningful statistic (constant sample, all-zero
    /// differences, single rating category, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown patch id: {0}")]
    UnknownPatch(String),

    /// Task pools ran out before the requested number of assignments.
    #[error("task pools exhausted after {assigned} of {requested} tasks")]
    PoolExhausted { assigned: usize, requested: usize },

    /// Rejection sampling could not honor the minimum point separation.
    #[error(
        "cannot place {requested} points with {min_separation_px} px separation in a \
         {width}x{height} patch; lower the density"
    )]
    SeparationInfeasible {
        requested: usize,
        min_separation_px: f64,
        width: u32,
        height: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

fn first_message(findings: &[Finding]) -> String {
    findings
        .first()
        .map(|f| f.message.clone())
        .unwrap_or_default()
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
