use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

/// An error response: status code plus a JSON body `{error, kind, field?, stage?}`.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub field: Option<String>,
    pub stage: Option<&'static str>,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into(), field: None, stage: None }
    }

    pub fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no model with id `{id}`"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<ctxkmp::Error> for ApiError {
    fn from(e: ctxkmp::Error) -> Self {
        use ctxkmp::Error as E;
        let stage = e.stage();
        let message = e.to_string();
        let (status, kind, field) = match e.root() {
            E::Schema { field, .. } => (StatusCode::BAD_REQUEST, "schema", Some(field.clone())),
            E::Config(_) | E::Input(_) => (StatusCode::BAD_REQUEST, "request", None),
            E::UnsupportedProjection(_) => (StatusCode::BAD_REQUEST, "projection", None),
            E::DimensionMismatch(_) => (StatusCode::UNPROCESSABLE_ENTITY, "dimension", None),
            E::Data(_) => (StatusCode::UNPROCESSABLE_ENTITY, "data", None),
            E::Conditioning { .. } | E::Diverged { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "numerical", None),
            E::Io { .. } | E::Stage { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        ApiError { status, kind, message, field, stage }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message, "kind": self.kind });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        if let Some(s) = self.stage {
            body["stage"] = json!(s);
        }
        (self.status, Json(body)).into_response()
    }
}
