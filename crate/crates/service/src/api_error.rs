use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::Serialize;
use smartb_core::error::Violation;
use smartb_core::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorBody {
    pub error: String,
    pub violations: Vec<Violation>,
}

/// An error response with a JSON body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                violations: Vec::new(),
            },
        }
    }

    pub fn invalid(violations: Vec<Violation>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: "invalid request".into(),
                violations,
            },
        }
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(v) => Self::invalid(v.0),
            Error::NullEffect => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            Error::Domain(_) | Error::Unsupported(_) | Error::Shape(_) => {
                Self::invalid(vec![Violation::new("", e.to_string())])
            }
            other => Self::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        crate::routes::json_bytes(
            self.status,
            serde_json::to_vec(&self.body).expect("error body serializes"),
        )
    }
}
