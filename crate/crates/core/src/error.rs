use thiserror::Error;

use crate::dataplane::DataError;
use crate::flow::{FlowError, ValidationReport};
use crate::questionnaire::QuestionnaireError;
use crate::trial::TrialError;

/// Coarse error class, mapped onto HTTP statuses and CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    Invalid,
    Conflict,
    /// Temporarily refused; retry later.
    Busy { retry_after_ms: u64 },
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("{what} `{id}` not found")]
    NotFound { what: &'static str, id: String },
    #[error("flow is not runnable: {0}")]
    InvalidFlow(ValidationReport),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("{0}")]
    Conflict(String),
    #[error("session `{0}` is not active")]
    SessionInactive(String),
    #[error("world `{world}` is not part of experiment `{experiment}`")]
    UnknownWorld { world: String, experiment: String },
    #[error("world `{world}` is reserved for group `{group}`")]
    WrongGroup { world: String, group: String },
    #[error("flow is in `{0}`, which is not terminal")]
    NotTerminal(String),
    #[error("questionnaires still missing: {}", .0.join(", "))]
    MissingQuestionnaires(Vec<String>),
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Questionnaire(#[from] QuestionnaireError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl PlatformError {
    pub fn not_found(what: &'static str, id: impl Into<String>) -> Self {
        PlatformError::NotFound {
            what,
            id: id.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use PlatformError::*;
        match self {
            NotFound { .. } => ErrorKind::NotFound,
            UnknownWorld { .. } => ErrorKind::NotFound,
            Conflict(_) => ErrorKind::Conflict,
            Questionnaire(QuestionnaireError::NotFound(_)) => ErrorKind::NotFound,
            Questionnaire(QuestionnaireError::Conflict(_)) => ErrorKind::Conflict,
            Data(DataError::UnknownSession(_)) => ErrorKind::NotFound,
            Data(DataError::DuplicateTrial(_))
            | Data(DataError::DuplicateResponse(_))
            | Data(DataError::DuplicateSession(_)) => ErrorKind::Conflict,
            Data(DataError::BatchTooLarge { retry_after_ms, .. }) => ErrorKind::Busy {
                retry_after_ms: *retry_after_ms,
            },
            _ => ErrorKind::Invalid,
        }
    }

    /// Validation report, when the error carries one.
    pub fn report(&self) -> Option<&ValidationReport> {
        match self {
            PlatformError::InvalidFlow(r) => Some(r),
            PlatformError::Flow(FlowError::Invalid(r)) => Some(r),
            _ => None,
        }
    }
}

pub type Result<T, E = PlatformError> = std::result::Result<T, E>;
