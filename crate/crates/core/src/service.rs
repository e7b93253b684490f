//! HTTP inference service under `/api/v1`.
//!
//! One model instance serves every request. Inference is serialized through
//! a FIFO lock and runs on the blocking pool so the accept loop stays live.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::model::Model;
use crate::pipeline::{decode_png, encode_png, segment, FieldSummary, PipelineError, RgbImage};
use crate::postprocess::NailInstance;
use crate::render::{render_overlay, RenderParams};

/// Request bodies above this are refused with 413 before decoding.
pub const MAX_BODY_BYTES: usize = 32 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub model_config: PathBuf,
    /// Longest accepted image side in pixels.
    pub max_edge: usize,
    pub render: RenderParams,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

struct AppState {
    model: Arc<Model>,
    queue: Mutex<()>,
    max_edge: usize,
    render: RenderParams,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Decode(_) | PipelineError::Empty => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<NailInstance>,
    pub fgbg_png_b64: String,
    pub field_summary: FieldSummary,
}

/// `image_png_b64` is required. Missing `params` fall back to the service
/// defaults; missing `instances` are computed by segmenting the image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderRequest {
    pub image_png_b64: String,
    #[serde(default)]
    pub params: Option<RenderParams>,
    #[serde(default)]
    pub instances: Option<Vec<NailInstance>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub composited_png_b64: String,
    pub overlay_png_b64: String,
}

fn decode_checked(bytes: &[u8], max_edge: usize) -> Result<RgbImage, ApiError> {
    let img = decode_png(bytes)?;
    if img.width.max(img.height) > max_edge {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {}x{}, longest side limit is {max_edge}", img.width, img.height),
        ));
    }
    Ok(img)
}

impl AppState {
    /// Runs `f` with exclusive use of the model, off the async workers.
    async fn with_model<R: Send + 'static>(
        &self,
        f: impl FnOnce(&Model) -> Result<R, ApiError> + Send + 'static,
    ) -> Result<R, ApiError> {
        let _turn = self.queue.lock().await;
        let model = Arc::clone(&self.model);
        tokio::task::spawn_blocking(move || f(&model))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn segment_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    let img = decode_checked(&body, state.max_edge)?;
    let start = Instant::now();
    let (w, h) = (img.width, img.height);
    let seg = state.with_model(move |m| Ok(segment(m, &img, None)?)).await?;
    log::info!(
        "segment {w}x{h}: {} instances in {:.1} ms",
        seg.instances.len(),
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(Json(SegmentResponse {
        width: w,
        height: h,
        fgbg_png_b64: B64.encode(seg.fgbg_png()?),
        field_summary: seg.field_summary(),
        instances: seg.instances,
    }))
}

async fn render_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<RenderResponse>, ApiError> {
    let req: RenderRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("request json: {e}")))?;
    let png = B64
        .decode(req.image_png_b64.as_bytes())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("image_png_b64: {e}")))?;
    let img = decode_checked(&png, state.max_edge)?;
    let params = req.params.unwrap_or(state.render);
    params
        .validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let instances = match req.instances {
        Some(v) => v,
        None => {
            let img = img.clone();
            state.with_model(move |m| Ok(segment(m, &img, None)?.instances)).await?
        }
    };
    let out = render_overlay(&img.data, img.width, img.height, &instances, &params)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(Json(RenderResponse {
        composited_png_b64: B64.encode(encode_png(&out.composited, img.width, img.height, 3)?),
        overlay_png_b64: B64.encode(encode_png(&out.overlay, img.width, img.height, 4)?),
    }))
}

fn cors(origin: Option<&str>) -> anyhow::Result<CorsLayer> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    Ok(match origin {
        None => layer.allow_origin(Any),
        Some(o) => layer.allow_origin(AllowOrigin::exact(HeaderValue::from_str(o)?)),
    })
}

/// The service routes around an already loaded model.
pub fn router(model: Model, max_edge: usize, render: RenderParams, cors_origin: Option<&str>) -> anyhow::Result<Router> {
    let state = Arc::new(AppState {
        model: Arc::new(model),
        queue: Mutex::new(()),
        max_edge,
        render,
    });
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/segment", post(segment_handler))
        .route("/render", post(render_handler))
        .with_state(state);
    Ok(Router::new()
        .nest("/api/v1", api)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors(cors_origin)?))
}

/// Loads the checkpoint and serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let model = Model::load(&cfg.checkpoint, &cfg.model_config)?;
    let app = router(model, cfg.max_edge, cfg.render, cfg.cors_origin.as_deref())?;
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
