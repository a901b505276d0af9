//! REST surface over a [`FileStore`] and a loaded model set.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use lungscope::pipeline::{ModelSet, PipelineConfig, ScanReport};
use lungscope::store::{FeedbackInput, FeedbackRecord, FeedbackScope, FileStore, PortableVolume, ScanRecord};
use lungscope::volume_io::WindowSpec;
use lungscope::{Error, Stage};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<FileStore>,
    pub models: Option<Arc<ModelSet>>,
    pub config: PipelineConfig,
}

/// Uniform error body: `{"error": "...", "stage": "..."}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: msg.into(),
                stage: None,
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Header(_) | Error::DimensionMismatch(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::InvalidArgument(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ErrorBody {
                error: e.to_string(),
                stage: e.stage(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Scan record with its report (if processed) and feedback history.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScanView {
    #[serde(flatten)]
    pub record: ScanRecord,
    pub report: Option<ScanReport>,
    pub feedback: Vec<FeedbackRecord>,
}

/// Feedback body; scope and slice index are implied by the route and must agree when given.
#[derive(Debug, Deserialize)]
struct FeedbackBody {
    corrected_label: String,
    #[serde(default)]
    author_role: Option<String>,
    #[serde(default)]
    scope: Option<FeedbackScope>,
    #[serde(default)]
    slice_index: Option<usize>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/scans", get(list_scans).post(submit_scan))
        .route("/api/scans/{id}", get(get_scan))
        .route("/api/scans/{id}/process", post(process_scan))
        .route("/api/scans/{id}/feedback", get(list_feedback).post(scan_feedback))
        .route("/api/scans/{id}/slices/{n}/image.png", get(slice_image))
        .route("/api/scans/{id}/slices/{n}/saliency.png", get(slice_saliency))
        .route("/api/scans/{id}/slices/{n}/feedback", post(slice_feedback))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such route") })
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> lungscope::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let versions = s.models.as_ref().map(|m| {
        serde_json::json!({
            "segmenter": m.segmenter.version,
            "detector": m.detector.version,
            "categorizer": m.categorizer.version,
        })
    });
    Json(serde_json::json!({
        "status": "ok",
        "models_loaded": s.models.is_some(),
        "model_versions": versions,
    }))
}

async fn list_scans(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    let store = s.store.clone();
    Ok(Json(blocking(move || store.list()).await?))
}

async fn submit_scan(State(s): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let store = s.store.clone();
    let record = blocking(move || store.submit(&PortableVolume::parse(&body)?)).await?;
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({ "scan_id": record.scan_id, "status": record.status })),
    ))
}

async fn get_scan(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let store = s.store.clone();
    let view = blocking(move || {
        Ok(ScanView {
            record: store.record(&id)?,
            report: store.report(&id)?,
            feedback: store.feedback(Some(&id), false)?,
        })
    })
    .await?;
    Ok(Json(view))
}

async fn process_scan(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let store = s.store.clone();
    let Some(models) = s.models.clone() else {
        blocking(move || store.record(&id)).await?;
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no models loaded"));
    };
    let config = s.config.clone();
    let report = blocking(move || store.process(&id, &models.models(), &config)).await?;
    Ok(Json(report))
}

fn slice_number(n: &str) -> ApiResult<usize> {
    n.parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("slice index must be a non-negative integer, got {n:?}")))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn slice_image(
    State(s): State<AppState>,
    Path((id, n)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let n = slice_number(&n)?;
    let mut window = s.config.window;
    for (key, slot) in [("width", &mut window.width), ("level", &mut window.level)] {
        if let Some(v) = q.get(key) {
            *slot = v
                .parse()
                .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("{key} must be a number")))?;
        }
    }
    let window = WindowSpec::new(window.width, window.level)?;
    let store = s.store.clone();
    Ok(png(blocking(move || store.slice_png(&id, n, &window)).await?))
}

async fn slice_saliency(State(s): State<AppState>, Path((id, n)): Path<(String, String)>) -> ApiResult<Response> {
    let n = slice_number(&n)?;
    let store = s.store.clone();
    Ok(png(blocking(move || store.saliency_png(&id, n)).await?))
}

async fn list_feedback(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let store = s.store.clone();
    let records = blocking(move || {
        store.record(&id)?;
        store.feedback(Some(&id), false)
    })
    .await?;
    Ok(Json(records))
}

async fn store_feedback(s: AppState, id: String, slice: Option<usize>, body: Bytes) -> ApiResult<Response> {
    let b: FeedbackBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed feedback: {e}")))?;
    let scope = if slice.is_some() { FeedbackScope::Slice } else { FeedbackScope::Scan };
    if b.scope.is_some_and(|sc| sc != scope) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "scope does not match the route"));
    }
    if b.slice_index.is_some() && b.slice_index != slice {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "slice_index does not match the route"));
    }
    let input = FeedbackInput {
        scan_id: id,
        scope,
        slice_index: slice,
        corrected_label: b.corrected_label,
        author_role: b.author_role.unwrap_or_else(|| "radiologist".into()),
    };
    let store = s.store.clone();
    let record = blocking(move || store.record_feedback(&input)).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn scan_feedback(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    store_feedback(s, id, None, body).await
}

async fn slice_feedback(State(s): State<AppState>, Path((id, n)): Path<(String, String)>, body: Bytes) -> ApiResult<Response> {
    let n = slice_number(&n)?;
    store_feedback(s, id, Some(n), body).await
}
