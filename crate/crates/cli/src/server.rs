//! HTTP JSON API over a [`GradingService`].
//!
//! | method | path                    | body / query                       | reply                          |
//! |--------|-------------------------|------------------------------------|--------------------------------|
//! | POST   | `/sessions`             | `{"clinician_id", "round_no"}`     | 201 session                    |
//! | GET    | `/sessions/{id}/next`   |                                    | case view or end-of-round      |
//! | POST   | `/sessions/{id}/submit` | `{"patient_alias", "grades", ...}` | 201 grading event              |
//! | POST   | `/sessions/{id}/abandon`|                                    | 204; the case loses its timing |
//! | GET    | `/events`               | `?clinician=&round=&arm=`          | JSON lines, append order       |
//! | GET    | `/admin/progress`       |                                    | counts, timing, washout        |
//!
//! Errors are `{"error": <kind>, "message": <text>}`.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use reader_bench::grading::{
    timing_completeness, EventFilter, GradingEvent, GradingService, NextCase, ProgressRow, Session, Submission,
    TimingCompleteness,
};
use reader_bench::Error;
use serde::{Deserialize, Serialize};

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: String) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request",
            message,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
            Error::Protocol(_) => (StatusCode::CONFLICT, "protocol"),
            Error::PredictorUnavailable(_) | Error::PredictorProtocol { .. } => {
                (StatusCode::SERVICE_UNAVAILABLE, "predictor_unavailable")
            }
            Error::Io(_) | Error::InvariantViolation(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
        };
        ApiError {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.kind, self.message);
        }
        (
            self.status,
            Json(serde_json::json!({ "error": self.kind, "message": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartSession {
    pub clinician_id: String,
    pub round_no: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Progress {
    pub washout_applied: bool,
    pub rounds: Vec<ProgressRow>,
    pub timing: Vec<TimingCompleteness>,
    pub events: usize,
}

pub fn router(service: Arc<GradingService>) -> Router {
    Router::new()
        .route("/sessions", post(start_session))
        .route("/sessions/{id}/next", get(next_case))
        .route("/sessions/{id}/submit", post(submit))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/events", get(events))
        .route("/admin/progress", get(progress))
        .with_state(service)
}

async fn start_session(
    State(service): State<Arc<GradingService>>,
    body: Result<Json<StartSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Session>)> {
    let Json(req) = body?;
    let session = service.start_session(&req.clinician_id, req.round_no)?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn next_case(State(service): State<Arc<GradingService>>, Path(id): Path<String>) -> ApiResult<Json<NextCase>> {
    Ok(Json(service.next_case(&id)?))
}

async fn submit(
    State(service): State<Arc<GradingService>>,
    Path(id): Path<String>,
    body: Result<Json<Submission>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<GradingEvent>)> {
    let Json(submission) = body?;
    let event = service.submit(&id, submission)?;
    Ok((StatusCode::CREATED, Json(event)))
}

async fn abandon(State(service): State<Arc<GradingService>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    service.abandon_case(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn events(
    State(service): State<Arc<GradingService>>,
    query: Result<Query<EventFilter>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(filter) = query?;
    let mut body = Vec::new();
    for e in service.log().export(&filter) {
        serde_json::to_writer(&mut body, &e).map_err(Error::from)?;
        body.push(b'\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn progress(State(service): State<Arc<GradingService>>) -> Json<Progress> {
    let events = service.log().events();
    Json(Progress {
        washout_applied: service.schedule().washout.is_some(),
        rounds: service.progress(),
        timing: timing_completeness(&events),
        events: events.len(),
    })
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
