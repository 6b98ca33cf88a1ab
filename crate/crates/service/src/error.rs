use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    /// Malformed or out-of-range input; `fields` names the offending keys.
    #[error("invalid request: {message}")]
    Invalid { message: String, fields: Vec<String> },

    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("{0}")]
    Conflict(String),

    #[error("event log {path}: {detail}")]
    Log { path: String, detail: String },

    #[error(transparent)]
    Core(#[from] prefnet::Error),
}

impl ServiceError {
    pub fn invalid(message: impl Into<String>, fields: Vec<String>) -> Self {
        ServiceError::Invalid { message: message.into(), fields }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Invalid { .. } => StatusCode::BAD_REQUEST,
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Log { .. } | ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let fields = match &self {
            ServiceError::Invalid { fields, .. } => fields.clone(),
            _ => Vec::new(),
        };
        (self.status(), Json(json!({ "error": self.to_string(), "fields": fields }))).into_response()
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
