use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use somatlas::analysis::AnalysisError;
use somatlas::annotate::{AnnotateError, LlmError};
use somatlas::data::DataError;
use somatlas::embed::EmbedError;
use somatlas::project::ProjectError;
use somatlas::som::SomError;

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    LlmUnavailable(String),
    #[error("{0}")]
    LlmMalformed(String),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        ServiceError::Conflict {
            code,
            message: message.into(),
        }
    }

    pub fn no_som() -> Self {
        Self::conflict("no_som", "no trained SOM in the project")
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::LlmUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::LlmMalformed(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn envelope(&self) -> ErrorEnvelope {
        let code = match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict { code, .. } => code,
            ServiceError::Invalid(_) => "invalid",
            ServiceError::LlmUnavailable(_) => "llm_unavailable",
            ServiceError::LlmMalformed(_) => "llm_malformed",
            ServiceError::Internal(_) => "internal",
        };
        ErrorEnvelope {
            code: code.into(),
            message: self.to_string(),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.envelope())).into_response()
    }
}

impl From<AnalysisError> for ServiceError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::UnknownMember(_) => ServiceError::NotFound(e.to_string()),
            e => ServiceError::Invalid(e.to_string()),
        }
    }
}

impl From<DataError> for ServiceError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::UnknownMember(_) => ServiceError::NotFound(e.to_string()),
            e => ServiceError::Invalid(e.to_string()),
        }
    }
}

impl From<LlmError> for ServiceError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Malformed(_) => ServiceError::LlmMalformed(e.to_string()),
            e => ServiceError::LlmUnavailable(e.to_string()),
        }
    }
}

impl From<AnnotateError> for ServiceError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Llm(l) => l.into(),
            e => ServiceError::Invalid(e.to_string()),
        }
    }
}

impl From<EmbedError> for ServiceError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Cancelled => ServiceError::conflict("superseded", "superseded by a newer anchor update"),
            EmbedError::NodeOutOfRange { .. } => ServiceError::NotFound(e.to_string()),
            EmbedError::NonFinite => ServiceError::Invalid(e.to_string()),
            e => ServiceError::Internal(e.to_string()),
        }
    }
}

impl From<SomError> for ServiceError {
    fn from(e: SomError) -> Self {
        match e {
            SomError::InvalidConfig(_) | SomError::EmptySamples | SomError::DimensionMismatch { .. } => {
                ServiceError::Invalid(e.to_string())
            }
            e => ServiceError::Internal(e.to_string()),
        }
    }
}

impl From<ProjectError> for ServiceError {
    fn from(e: ProjectError) -> Self {
        ServiceError::Invalid(e.to_string())
    }
}
