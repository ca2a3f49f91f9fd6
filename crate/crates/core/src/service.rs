// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP API.
//!
//! | route | |
//! |---|---|
//! | `GET /api/v1/config` | model hyperparameters, 503 until weights are loaded |
//! | `POST /api/v1/infer?capture=&topk=&track=` | multipart field `image`, returns the trace JSON |
//! | `GET /api/v1/attention?trace_id=&layer=&head=&token=` | one attention slice of a cached trace |
//!
//! Traces are kept in a bounded LRU cache keyed by `trace_id` so the UI can
//! query slices without re-uploading.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use parking_lot::{Mutex, RwLock};
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::engine::{Engine, EngineError};
use crate::image::ImageError;
use crate::lens::{attention_slice, HeadSelector, LensError};
use crate::model::{InferenceTrace, ModelError};
use crate::report::{CaptureMode, ConfigView, TraceOptions};

pub const MIB: usize = 1024 * 1024;
pub const DEFAULT_CACHE_CAPACITY: usize = 32;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub weight_path: PathBuf,
    pub labels_path: Option<PathBuf>,
    pub num_heads: Option<usize>,
    pub listen_port: u16,
    pub max_upload_bytes: usize,
    pub capture_default: CaptureMode,
    pub cors_allowed_origins: Vec<String>,
    pub cache_capacity: usize,
}

impl ServiceConfig {
    pub fn new(weight_path: impl Into<PathBuf>, listen_port: u16) -> Self {
        Self {
            weight_path: weight_path.into(),
            labels_path: None,
            num_heads: None,
            listen_port,
            max_upload_bytes: 8 * MIB,
            capture_default: CaptureMode::Attention,
            cors_allowed_origins: Vec::new(),
            cache_capacity: DEFAULT_CACHE_CAPACITY,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_upload_bytes < MIB {
            return Err(format!("max_upload_bytes must be at least 1 MiB, got {}", self.max_upload_bytes));
        }
        if self.listen_port == 0 {
            return Err("listen_port must be in [1, 65535]".into());
        }
        if self.cache_capacity == 0 {
            return Err("cache_capacity must be positive".into());
        }
        Ok(())
    }
}

enum ModelState {
    Loading,
    Ready(Arc<Engine>),
    Failed(String),
}

/// Shared handler state: the model slot and the trace cache.
pub struct AppState {
    model: RwLock<ModelState>,
    cache: Mutex<LruCache<String, Arc<InferenceTrace>>>,
    capture_default: CaptureMode,
}

impl AppState {
    pub fn loading(cache_capacity: usize, capture_default: CaptureMode) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(ModelState::Loading),
            cache: Mutex::new(LruCache::new(
                NonZeroUsize::new(cache_capacity).unwrap_or(NonZeroUsize::MIN),
            )),
            capture_default,
        })
    }

    pub fn ready(engine: Engine, cache_capacity: usize) -> Arc<Self> {
        let state = Self::loading(cache_capacity, CaptureMode::Attention);
        state.set_ready(engine);
        state
    }

    pub fn set_ready(&self, engine: Engine) {
        *self.model.write() = ModelState::Ready(Arc::new(engine));
    }

    pub fn set_failed(&self, reason: String) {
        *self.model.write() = ModelState::Failed(reason);
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        match &*self.model.read() {
            ModelState::Ready(e) => Ok(Arc::clone(e)),
            ModelState::Loading => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "ModelLoading",
                "weights are still loading",
            )),
            ModelState::Failed(reason) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "ModelUnavailable",
                format!("weights failed to load: {reason}"),
            )),
        }
    }

    pub fn cached(&self, trace_id: &str) -> Option<Arc<InferenceTrace>> {
        self.cache.lock().get(trace_id).cloned()
    }

    pub fn cached_count(&self) -> usize {
        self.cache.lock().len()
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({"error": {"code": self.code, "message": self.message}}));
        (self.status, body).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            EngineError::Image(ImageError::UnsupportedFormat) => (StatusCode::BAD_REQUEST, "UnsupportedFormat"),
            EngineError::Image(ImageError::CorruptImage(_)) => (StatusCode::BAD_REQUEST, "CorruptImage"),
            EngineError::Image(ImageError::InvalidSize { .. }) => (StatusCode::BAD_REQUEST, "CorruptImage"),
            EngineError::Image(ImageError::NotSquare { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "NotSquare"),
            EngineError::Image(ImageError::IndivisibleSide { .. }) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "IndivisibleSide")
            }
            EngineError::Model(ModelError::PatchGeometry { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "PatchGeometry"),
            EngineError::Lens(LensError::KOutOfRange { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "KOutOfRange"),
            EngineError::Lens(LensError::IndexOutOfRange { .. }) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "IndexOutOfRange")
            }
            EngineError::Model(ModelError::Tensor(_)) | EngineError::Lens(LensError::Tensor(_)) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "NumericError")
            }
            EngineError::Weights(_) | EngineError::Labels(_) => (StatusCode::INTERNAL_SERVER_ERROR, "ModelError"),
        };
        Self::new(status, code, message)
    }
}

#[derive(Debug, Deserialize)]
struct InferQuery {
    capture: Option<String>,
    topk: Option<usize>,
    /// Comma-separated class indices whose lens curves should be included.
    track: Option<String>,
}

#[derive(Debug, Deserialize)]
struct AttentionQuery {
    trace_id: String,
    layer: usize,
    head: String,
    token: usize,
}

async fn get_config(State(state): State<Arc<AppState>>) -> Result<Json<ConfigView>, ApiError> {
    let engine = state.engine()?;
    Ok(Json(ConfigView::from(&engine.weights.config)))
}

fn parse_options(q: &InferQuery, default_capture: CaptureMode) -> Result<TraceOptions, ApiError> {
    let capture = match &q.capture {
        None => default_capture,
        Some(s) => s.parse().map_err(|m: String| ApiError::bad_request("InvalidQuery", m))?,
    };
    let tracked_classes = match &q.track {
        None => Vec::new(),
        Some(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| ApiError::bad_request("InvalidQuery", format!("track must list class indices, got {s:?}")))?,
    };
    Ok(TraceOptions {
        capture,
        top_k: q.topk.unwrap_or(TraceOptions::default().top_k),
        tracked_classes,
    })
}

async fn post_infer(
    State(state): State<Arc<AppState>>,
    query: Result<Query<InferQuery>, axum::extract::rejection::QueryRejection>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let engine = state.engine()?;
    let Query(query) = query.map_err(|e| ApiError::bad_request("InvalidQuery", e.body_text()))?;
    let mut opts = parse_options(&query, state.capture_default)?;
    // Clamp k so small models still answer the default request.
    if query.topk.is_none() {
        opts.top_k = opts.top_k.min(engine.weights.config.num_classes);
    }
    let mut multipart =
        multipart.map_err(|e| ApiError::new(e.status(), "InvalidMultipart", e.body_text()))?;

    let mut image = None;
    loop {
        let field = multipart
            .next_field()
            .await
            .map_err(|e| ApiError::new(e.status(), multipart_code(e.status()), e.body_text()))?;
        let Some(field) = field else { break };
        if field.name() == Some("image") {
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::new(e.status(), multipart_code(e.status()), e.body_text()))?;
            image = Some(bytes);
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("MissingImage", "multipart field \"image\" is required"))?;

    let worker = Arc::clone(&engine);
    let result = tokio::task::spawn_blocking(move || worker.infer(&image, &opts))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "WorkerPanic", e.to_string()))??;
    log::info!(
        "trace {} class {} in {:.1} ms",
        result.trace_id,
        result.trace.predicted_class,
        result.trace.elapsed_ms
    );
    state
        .cache
        .lock()
        .put(result.trace_id.clone(), Arc::new(result.trace));
    Ok(([(header::CONTENT_TYPE, "application/json")], result.json).into_response())
}

fn multipart_code(status: StatusCode) -> &'static str {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        "PayloadTooLarge"
    } else {
        "InvalidMultipart"
    }
}

async fn get_attention(
    State(state): State<Arc<AppState>>,
    query: Result<Query<AttentionQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request("InvalidQuery", e.body_text()))?;
    let head: HeadSelector = q
        .head
        .parse()
        .map_err(|m: String| ApiError::bad_request("InvalidQuery", m))?;
    let trace = state.cached(&q.trace_id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownTrace",
            format!("trace {:?} is not cached", q.trace_id),
        )
    })?;
    let slice = attention_slice(&trace, q.layer, head, q.token).map_err(EngineError::from)?;
    Ok(Json(slice).into_response())
}

/// Rejects oversize uploads from `Content-Length` before reading the body.
async fn enforce_upload_limit(
    State(limit): State<usize>,
    headers: HeaderMap,
    request: axum::extract::Request,
    next: axum::middleware::Next,
) -> Response {
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > limit) {
        return ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "PayloadTooLarge",
            format!("upload exceeds {limit} bytes"),
        )
        .into_response();
    }
    next.run(request).await
}

fn cors_layer(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        return Some(layer.allow_origin(Any));
    }
    let values: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    Some(layer.allow_origin(AllowOrigin::list(values)))
}

pub fn router(state: Arc<AppState>, max_upload_bytes: usize, cors_allowed_origins: &[String]) -> Router {
    let infer = post(post_infer)
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .layer(axum::middleware::from_fn_with_state(max_upload_bytes, enforce_upload_limit));
    let app = Router::new()
        .route("/api/v1/config", get(get_config))
        .route("/api/v1/infer", infer)
        .route("/api/v1/attention", get(get_attention))
        .with_state(state);
    match cors_layer(cors_allowed_origins) {
        Some(cors) => app.layer(cors),
        None => app,
    }
}

/// Binds, starts loading weights in the background and serves until Ctrl-C.
/// `/config` answers 503 until loading finishes.
pub async fn run(config: ServiceConfig) -> std::io::Result<()> {
    config
        .validate()
        .map_err(|m| std::io::Error::new(std::io::ErrorKind::InvalidInput, m))?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", config.listen_port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let state = AppState::loading(config.cache_capacity, config.capture_default);

    let loader_state = Arc::clone(&state);
    let loader_cfg = config.clone();
    tokio::task::spawn_blocking(move || {
        match Engine::load(
            &loader_cfg.weight_path,
            loader_cfg.labels_path.as_deref(),
            loader_cfg.num_heads,
        ) {
            Ok(engine) => {
                log::info!("model ready: {:?}", engine.weights.config);
                loader_state.set_ready(engine);
            }
            Err(e) => {
                log::error!("failed to load {}: {e}", loader_cfg.weight_path.display());
                loader_state.set_failed(e.to_string());
            }
        }
    });

    let app = router(state, config.max_upload_bytes, &config.cors_allowed_origins);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
