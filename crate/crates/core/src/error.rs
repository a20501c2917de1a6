use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: {constraint}")]
    InvalidRecord {
        path: PathBuf,
        line: usize,
        constraint: String,
    },

    #[error("{path}:{line}: interaction references unknown item `{item}`")]
    UnknownItem {
        path: PathBuf,
        line: usize,
        item: String,
    },

    #[error("{path}:{line}: duplicate interaction ({user}, {item}, {ts})")]
    DuplicateTriple {
        path: PathBuf,
        line: usize,
        user: String,
        item: String,
        ts: i64,
    },

    #[error("domains `{source_domain}` and `{target_domain}` share no users")]
    EmptyOverlap {
        source_domain: String,
        target_domain: String,
    },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("missing label map for criterion {0}")]
    MissingLabels(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("client request failed: {0}")]
    Client(String),

    #[error("malformed model response: {0}")]
    MalformedResponse(String),

    #[error("model response is missing persona field `{0}`")]
    MissingCriterion(String),

    #[error("user `{0}` is not an overlapping user")]
    NotOverlapping(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("stage `{stage}` requires `{dependency}` artifacts; run `{dependency}` first")]
    MissingDependency {
        stage: String,
        dependency: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short identifier used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::InvalidRecord { .. } => "invalid_record",
            Error::UnknownItem { .. } => "unknown_item",
            Error::DuplicateTriple { .. } => "duplicate_triple",
            Error::EmptyOverlap { .. } => "empty_overlap",
            Error::DegenerateSplit(_) => "degenerate_split",
            Error::EmptyInput(_) => "empty_input",
            Error::MissingLabels(_) => "missing_labels",
            Error::Shape(_) => "shape",
            Error::ZeroNorm => "zero_norm",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Divergence { .. } => "divergence",
            Error::Client(_) => "client",
            Error::MalformedResponse(_) => "malformed_response",
            Error::MissingCriterion(_) => "missing_criterion",
            Error::NotOverlapping(_) => "not_overlapping",
            Error::Unknown { .. } => "unknown",
            Error::MissingDependency { .. } => "missing_dependency",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
