use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use crate::wire::{ErrorBody, ErrorDetail};

/// A core error on its way to an HTTP response.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Core(#[from] landtune::Error),
    #[error("worker task failed: {0}")]
    Join(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        use landtune::Error as E;
        match self {
            ApiError::Core(e) => match e {
                E::NotFound { .. } => StatusCode::NOT_FOUND,
                E::Busy(_) | E::Precondition(_) => StatusCode::CONFLICT,
                E::Config(_)
                | E::Coordinate { .. }
                | E::Extent { .. }
                | E::Empty(_)
                | E::Palette(_)
                | E::Parse { .. }
                | E::Dimension { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Join(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Core(e) => e.code(),
            ApiError::Join(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code().into(),
                message: self.to_string(),
            },
        };
        (self.status(), Json(body)).into_response()
    }
}
