use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use forge_core::ForgeError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] ForgeError),

    #[error("{what} `{id}` not found")]
    NotFound { what: &'static str, id: String },

    #[error("{0}")]
    Conflict(&'static str, String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Core(e) => match e {
                ForgeError::State(_) | ForgeError::Mode(_) => StatusCode::CONFLICT,
                ForgeError::Io(_) | ForgeError::Load { .. } | ForgeError::Divergence(_) => {
                    StatusCode::INTERNAL_SERVER_ERROR
                }
                _ => StatusCode::UNPROCESSABLE_ENTITY,
            },
            ServiceError::NotFound { .. } => StatusCode::NOT_FOUND,
            ServiceError::Conflict(..) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.code(),
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Conflict(code, _) => code,
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = json!({"error": {"code": self.code(), "message": self.to_string()}});
        (status, Json(body)).into_response()
    }
}
