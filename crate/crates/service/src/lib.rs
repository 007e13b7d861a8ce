//! JSON-over-HTTP access to running pipeline sessions.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/runs/{id}/status` | |
//! | GET | `/runs/{id}/tasks` | |
//! | POST | `/runs/{id}/tasks/{record_id}/label` | `{"label": "fake"\|"real", "annotator": "..."}` |
//!
//! Reads come from the session's latest snapshot. Label submissions go
//! through the session's command queue, so the pipeline thread stays the
//! only writer.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use coalfake::pipeline::session::{SessionHandle, Snapshot};
use coalfake::pipeline::{AnnotationTask, HumanLabelOutcome, PipelineError, ServiceConfig};
use coalfake::Label;

pub const TOKEN_HEADER: &str = "x-coalfake-token";

#[derive(Clone)]
pub struct AppState {
    runs: Arc<BTreeMap<String, SessionHandle>>,
    token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(runs: impl IntoIterator<Item = (String, SessionHandle)>, token: Option<String>) -> Self {
        AppState {
            runs: Arc::new(runs.into_iter().collect()),
            token: token.map(Into::into),
        }
    }

    fn run(&self, id: &str) -> Result<&SessionHandle, ApiError> {
        self.runs
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_run", format!("no run named {id:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.to_string(),
                message: message.into(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::UnknownRecord(_) | PipelineError::NotInQueue(_) | PipelineError::NotAwaiting(_) => {
                (StatusCode::NOT_FOUND, "unknown_task")
            }
            PipelineError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

/// A parsed label submission.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBody {
    pub label: Label,
    pub annotator: String,
}

#[derive(Deserialize)]
struct RawLabelBody {
    label: String,
    #[serde(default)]
    annotator: Option<String>,
}

/// Parses a submission body. Labels are exactly `"fake"` or `"real"`.
pub fn parse_label_body(bytes: &[u8]) -> Result<LabelBody, ApiError> {
    let raw: RawLabelBody = serde_json::from_slice(bytes)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_body", e.to_string()))?;
    let label = match raw.label.as_str() {
        "fake" => Label::Fake,
        "real" => Label::Real,
        other => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "bad_label",
                format!("label must be \"fake\" or \"real\", got {other:?}"),
            ))
        }
    };
    Ok(LabelBody {
        label,
        annotator: raw.annotator.unwrap_or_else(|| "anonymous".into()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub applied: bool,
    pub queue_size: usize,
    pub status: coalfake::pipeline::Status,
}

async fn status(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let snapshot: Arc<Snapshot> = app.run(&id)?.snapshot();
    Ok(Json(&*snapshot).into_response())
}

async fn tasks(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Vec<AnnotationTask>>, ApiError> {
    Ok(Json(app.run(&id)?.snapshot().tasks.clone()))
}

async fn submit(
    State(app): State<AppState>,
    Path((id, record_id)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<SubmitResponse>, ApiError> {
    let handle = app.run(&id)?.clone();
    let body = parse_label_body(&body)?;
    let outcome: HumanLabelOutcome =
        tokio::task::spawn_blocking(move || handle.submit_label(&record_id, body.label, &body.annotator))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(SubmitResponse {
        applied: outcome.applied,
        queue_size: outcome.remaining,
        status: outcome.status,
    }))
}

async fn require_token(State(app): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(expected) = &app.token {
        let given = request.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_ref()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong token").into_response();
        }
    }
    next.run(request).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::HeaderName::from_static(TOKEN_HEADER)]);
    if origins.is_empty() {
        layer.allow_origin(Any)
    } else {
        let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
        layer.allow_origin(AllowOrigin::list(list))
    }
}

pub fn router(app: AppState, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/runs/{id}/status", get(status))
        .route("/runs/{id}/tasks", get(tasks))
        .route("/runs/{id}/tasks/{record_id}/label", post(submit))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .layer(cors(cors_origins))
        .with_state(app)
}

/// Serves until `shutdown` resolves or the listener fails.
pub async fn serve(
    runs: Vec<(String, SessionHandle)>,
    config: &ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(AppState::new(runs, config.token.clone()), &config.cors_origins);
    let listener = tokio::net::TcpListener::bind((config.host.as_str(), config.port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "service listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
