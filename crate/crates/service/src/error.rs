use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use lcnerf_core::Error;
use serde_json::{json, Value};

/// Error body `{code, message, detail}` with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(code: &'static str, what: &str, name: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, format!("unknown {what} `{name}`")).with_detail(json!({ what: name }))
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "job_active", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::UnknownRegion { id, regions } => {
                Self::unprocessable("unknown_region", message).with_detail(json!({ "region_id": id, "regions": regions }))
            }
            Error::LabelOutOfRange { label, row, col, limit } => Self::unprocessable("label_out_of_range", message)
                .with_detail(json!({ "label": label, "row": row, "col": col, "limit": limit })),
            Error::Shape { .. } => Self::unprocessable("shape_mismatch", message),
            Error::Parse(_) | Error::Image { .. } | Error::Version { .. } => Self::unprocessable("malformed_input", message),
            Error::Invalid(_) | Error::NonFinite(_) => Self::unprocessable("invalid_argument", message),
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
