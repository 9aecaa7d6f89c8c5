//! JSON-over-HTTP API used by the annotation client.
//!
//! | method | path                  | body / result                          |
//! |--------|-----------------------|----------------------------------------|
//! | POST   | `/api/register`       | `{annotator_id}` → registration        |
//! | POST   | `/api/claim`          | `{annotator_id}` → task or `done`      |
//! | POST   | `/api/submit`         | submission → acknowledgement           |
//! | GET    | `/api/progress`       | campaign progress                      |
//! | GET    | `/api/export/{file}`  | `segments`, `annotations` or `timing`  |
//!
//! When a shared token is configured every request must carry
//! `Authorization: Bearer <token>`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use esa_core::export::render_jsonl;
use serde::Deserialize;
use serde_json::json;

use crate::store::{CampaignService, SubmitRequest};
use crate::ServiceError;

#[derive(Clone)]
struct AppState {
    service: Arc<CampaignService>,
    token: Option<Arc<str>>,
}

#[derive(Debug, Deserialize)]
struct AnnotatorBody {
    annotator_id: String,
}

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::UnknownAnnotator(_) | ServiceError::UnknownSegment(_) => StatusCode::NOT_FOUND,
            ServiceError::NotClaimed { .. } | ServiceError::NoBatchAvailable(_) => StatusCode::CONFLICT,
            ServiceError::InvalidSubmission(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.0.to_string() });
        if let ServiceError::InvalidSubmission(v) = &self.0 {
            body["violations"] = json!(v);
        }
        (status, Json(body)).into_response()
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Config(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn register(State(app): State<AppState>, Json(body): Json<AnnotatorBody>) -> Result<Response, ApiError> {
    let reg = blocking(move || app.service.register(&body.annotator_id)).await?;
    Ok(Json(reg).into_response())
}

async fn claim(State(app): State<AppState>, Json(body): Json<AnnotatorBody>) -> Result<Response, ApiError> {
    let res = blocking(move || app.service.claim_next(&body.annotator_id)).await?;
    Ok(Json(res).into_response())
}

async fn submit(State(app): State<AppState>, Json(body): Json<SubmitRequest>) -> Result<Response, ApiError> {
    let ack = blocking(move || app.service.submit(&body)).await?;
    Ok(Json(ack).into_response())
}

async fn progress(State(app): State<AppState>) -> Response {
    Json(app.service.progress()).into_response()
}

async fn export(State(app): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let bundle = blocking(move || app.service.export()).await?;
    let text = match file.trim_end_matches(".jsonl") {
        "segments" => render_jsonl("esa.segments", &bundle.segments),
        "annotations" => render_jsonl("esa.annotations", &bundle.annotations),
        "timing" => render_jsonl("esa.timing", &bundle.timing),
        _ => return Ok(StatusCode::NOT_FOUND.into_response()),
    };
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return (StatusCode::UNAUTHORIZED, Json(json!({"error": "missing or wrong token"}))).into_response();
        }
    }
    next.run(req).await
}

pub fn router(service: Arc<CampaignService>, token: Option<String>) -> Router {
    let state = AppState {
        service,
        token: token.map(Arc::from),
    };
    Router::new()
        .route("/api/register", post(register))
        .route("/api/claim", post(claim))
        .route("/api/submit", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/export/{file}", get(export))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(service: Arc<CampaignService>, addr: SocketAddr, token: Option<String>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service, token))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
