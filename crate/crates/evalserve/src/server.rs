//! HTTP JSON API.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::state::SubmitError;
use crate::{ServeConfig, ServeError, Service};

/// Milliseconds since the Unix epoch; injectable for tests.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    })
}

#[derive(Clone)]
struct AppState {
    service: Arc<Mutex<Service>>,
    clock: Clock,
}

#[derive(Debug, Deserialize)]
struct AssignmentQuery {
    rater_id: String,
}

#[derive(Debug, Deserialize)]
struct ResponseBody {
    rater_id: String,
    instance_id: String,
    chosen_index: usize,
    permutation_token: String,
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

fn internal(e: ServeError) -> Response {
    tracing::error!("{e}");
    error(StatusCode::INTERNAL_SERVER_ERROR, e)
}

async fn assignment(State(app): State<AppState>, Query(q): Query<AssignmentQuery>) -> Response {
    if q.rater_id.trim().is_empty() {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "rater_id must be non-empty",
        );
    }
    let now = (app.clock)();
    let mut svc = app.service.lock().expect("service lock");
    match svc.next_assignment(&q.rater_id, now) {
        Ok(Some(view)) => (StatusCode::OK, Json(view)).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => internal(e),
    }
}

async fn response(
    State(app): State<AppState>,
    body: Result<Json<ResponseBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Ok(Json(b)) = body else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "malformed response body");
    };
    let now = (app.clock)();
    let mut svc = app.service.lock().expect("service lock");
    match svc.submit(
        &b.rater_id,
        &b.instance_id,
        b.chosen_index,
        &b.permutation_token,
        now,
    ) {
        Ok(Ok(())) => (StatusCode::CREATED, Json(json!({ "status": "recorded" }))).into_response(),
        Ok(Err(e @ (SubmitError::Duplicate { .. } | SubmitError::InstanceFull(_)))) => {
            error(StatusCode::CONFLICT, e)
        }
        Ok(Err(e @ SubmitError::Invalid(_))) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
        Err(e) => internal(e),
    }
}

async fn report(State(app): State<AppState>) -> Response {
    let svc = app.service.lock().expect("service lock");
    (StatusCode::OK, Json(svc.report())).into_response()
}

async fn training_examples(State(app): State<AppState>) -> Response {
    let svc = app.service.lock().expect("service lock");
    (StatusCode::OK, Json(svc.training.clone())).into_response()
}

pub fn router(service: Service, clock: Clock) -> Router {
    let state = AppState {
        service: Arc::new(Mutex::new(service)),
        clock,
    };
    Router::new()
        .route("/api/v1/assignment", get(assignment))
        .route("/api/v1/response", post(response))
        .route("/api/v1/report", get(report))
        .route("/api/v1/training_examples", get(training_examples))
        .with_state(state)
}

/// Loads the service and serves until Ctrl-C.
pub async fn serve(cfg: ServeConfig) -> Result<(), ServeError> {
    let service = Service::open(&cfg)?;
    tracing::info!(
        instances = service.pool.len(),
        events = service.events().len(),
        "replayed log {}",
        cfg.log.display()
    );
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service, system_clock()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
