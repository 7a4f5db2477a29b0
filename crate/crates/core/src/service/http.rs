use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::error::{ErrorCode, Result, VipError};
use crate::service::config::ServiceConfig;
use crate::service::session::{parse_request, SessionManager};

pub const SNAPSHOT_PATH_HEADER: &str = "x-vip-snapshot-path";

pub fn status_for(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::Validation | ErrorCode::Version => StatusCode::BAD_REQUEST,
        ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::Conflict => StatusCode::CONFLICT,
        ErrorCode::Infeasible => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::Numerical => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct ApiError(VipError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.0.code();
        let body = serde_json::json!({ "error": { "code": code, "message": self.0.to_string() } });
        (status_for(code), Json(body)).into_response()
    }
}

fn reply<T: Serialize>(status: StatusCode, r: Result<T>) -> Response {
    match r {
        Ok(v) => (status, Json(v)).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

type Shared = State<Arc<SessionManager>>;

async fn create(State(m): Shared, body: Bytes) -> Response {
    reply(
        StatusCode::CREATED,
        parse_request(&body).and_then(|req| m.create(req)),
    )
}

async fn plan(State(m): Shared, Path(id): Path<String>, body: Bytes) -> Response {
    reply(
        StatusCode::OK,
        parse_request(&body).and_then(|req| m.plan(&id, req)),
    )
}

async fn observe(State(m): Shared, Path(id): Path<String>, body: Bytes) -> Response {
    reply(
        StatusCode::OK,
        parse_request(&body).and_then(|req| m.observe(&id, req)),
    )
}

async fn beliefs(State(m): Shared, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, m.beliefs(&id))
}

async fn audit(State(m): Shared, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, m.audit(&id))
}

async fn snapshot(State(m): Shared, Path(id): Path<String>) -> Response {
    match m.snapshot(&id) {
        Ok(out) => {
            let mut resp = (
                StatusCode::OK,
                [(header::CONTENT_TYPE, "application/json")],
                out.bytes,
            )
                .into_response();
            if let Some(v) = out
                .path
                .and_then(|p| HeaderValue::from_str(&p.to_string_lossy()).ok())
            {
                resp.headers_mut().insert(SNAPSHOT_PATH_HEADER, v);
            }
            resp
        }
        Err(e) => ApiError(e).into_response(),
    }
}

async fn restore(State(m): Shared, body: Bytes) -> Response {
    reply(StatusCode::CREATED, m.restore(&body))
}

async fn health(State(m): Shared) -> Response {
    (StatusCode::OK, Json(m.health())).into_response()
}

pub fn router(manager: Arc<SessionManager>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/restore", post(restore))
        .route("/sessions/{id}/plan", post(plan))
        .route("/sessions/{id}/observe", post(observe))
        .route("/sessions/{id}/beliefs", get(beliefs))
        .route("/sessions/{id}/audit", get(audit))
        .route("/sessions/{id}/snapshot", post(snapshot))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(manager)
}

/// Binds `config.bind` and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    let manager = Arc::new(SessionManager::new(config.snapshot_dir.clone()));
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(manager, config.max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
