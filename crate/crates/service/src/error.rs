use crowdflow_core::workflow::Violation;
use serde_json::{json, Value};

use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("run {run} is corrupt: {reason}")]
    Corrupt { run: String, reason: String },
    #[error("workflow has violations: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    Invalid(Vec<Violation>),
    #[error("{0}")]
    Unprocessable(String),
    #[error("no judgments recorded yet")]
    NoJudgments,
    #[error("adapter: {0}")]
    Adapter(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict(_) | ServiceError::Corrupt { .. } | ServiceError::NoJudgments => 409,
            ServiceError::Invalid(_) | ServiceError::Unprocessable(_) => 422,
            ServiceError::Adapter(_) => 502,
            ServiceError::Store(_) | ServiceError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "BAD_REQUEST",
            ServiceError::NotFound(_) => "NOT_FOUND",
            ServiceError::Conflict(_) => "ILLEGAL_TRANSITION",
            ServiceError::Corrupt { .. } => "CORRUPT",
            ServiceError::Invalid(_) => "INVALID_WORKFLOW",
            ServiceError::Unprocessable(_) => "UNPROCESSABLE",
            ServiceError::NoJudgments => "NO_JUDGMENTS",
            ServiceError::Adapter(_) => "ADAPTER",
            ServiceError::Store(_) => "STORAGE",
            ServiceError::Internal(_) => "INTERNAL",
        }
    }

    pub fn body(&self) -> Value {
        let mut v = json!({ "error": self.code(), "message": self.to_string() });
        if let ServiceError::Invalid(violations) = self {
            v["violations"] = serde_json::to_value(violations).expect("violations serialize");
        }
        v
    }
}
