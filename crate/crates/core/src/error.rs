use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error at line {line}: {cause}")]
    Parse { line: usize, cause: String },

    #[error("duplicate document id `{0}`")]
    DuplicateId(String),

    #[error("invalid document `{id}`: {reason}")]
    InvalidDocument { id: String, reason: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("section {index} of document `{id}` has no label")]
    UnlabeledSection { id: String, index: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("critic does not support exact inference: {0}")]
    UnsupportedCritic(String),

    #[error("critic mismatch: {0}")]
    CriticMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("segment `{0}` is not in the emission support")]
    UnknownSegment(String),

    #[error("degenerate initialization: {0}")]
    DegenerateInit(String),

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("document `{0}` carries no mention annotations")]
    MissingMentions(String),

    #[error("no training data")]
    EmptyTrainingData,

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::SingularCovariance | Error::Numeric(_) | Error::DegenerateInit(_) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }

    /// Stable machine-readable code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateId(_) => "duplicate-id",
            Error::InvalidDocument { .. } => "invalid-document",
            Error::EmptyCorpus => "empty-corpus",
            Error::UnlabeledSection { .. } => "unlabeled-section",
            Error::EmptyInput(_) => "empty-input",
            Error::UnsupportedCritic(_) => "unsupported-critic",
            Error::CriticMismatch(_) => "critic-mismatch",
            Error::Config(_) => "config",
            Error::UnknownSegment(_) => "unknown-segment",
            Error::DegenerateInit(_) => "degenerate-init",
            Error::EmptyLabelSet => "empty-label-set",
            Error::MissingMentions(_) => "missing-mentions",
            Error::EmptyTrainingData => "empty-training-data",
            Error::EmptyVocabulary => "empty-vocabulary",
            Error::SingularCovariance => "singular-covariance",
            Error::Numeric(_) => "numeric",
            Error::Serde(_) => "serialization",
        }
    }
}
