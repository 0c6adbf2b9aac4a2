use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in latent batch row {row}")]
    NonFiniteLatent { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cluster index {index} out of range for {clusters} clusters")]
    ClusterOutOfRange { index: usize, clusters: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("GMM initialization failed: {0}")]
    GmmInit(String),

    #[error("non-finite loss at step {step} during {phase}: {detail}")]
    NonFiniteLoss {
        step: u64,
        phase: String,
        detail: String,
    },

    #[error("ingestion error in {record}: {reason}")]
    Ingest { record: String, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration:\n{}", format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A single failed configuration constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub constraint: String,
}

impl ConfigIssue {
    pub fn new(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            constraint: constraint.into(),
        }
    }
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "`{}`: {}", self.key, self.constraint)
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
