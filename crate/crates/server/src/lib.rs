//! HTTP service for interactive annotation sessions.
//!
//! Every coordinate and mask exchanged with clients is at the resolution
//! of the uploaded image; letterboxing to the model input is internal.

pub mod error;
pub mod geometry;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use icmf_core::dataset::{decode_png, encode_png, image_to_mask, image_to_tensor, mask_to_gray};
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ApiResult};
pub use session::{Backend, MaskSummary, Rle, Session, Store};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Side of the square model input.
    pub side: usize,
    pub ttl: Duration,
    pub capacity: usize,
    /// Uploads with a larger height or width are refused.
    pub max_side: usize,
    pub body_limit: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            side: 448,
            ttl: Duration::from_secs(30 * 60),
            capacity: 64,
            max_side: 2048,
            body_limit: 64 << 20,
            static_dir: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub backend: Backend,
    pub cfg: Arc<ServerConfig>,
}

impl AppState {
    pub fn new(backend: Backend, cfg: ServerConfig) -> Self {
        Self { store: Arc::new(Store::new(cfg.ttl, cfg.capacity)), backend, cfg: Arc::new(cfg) }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickRequest {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
}

#[derive(Debug, Serialize)]
pub struct ClickResponse {
    pub click_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub mask_summary: Option<MaskSummary>,
}

#[derive(Debug, Deserialize)]
pub struct MaskQuery {
    #[serde(default)]
    pub format: Option<String>,
}

pub fn router(state: AppState) -> Router {
    let limit = state.cfg.body_limit;
    let static_dir = state.cfg.static_dir.clone();
    let app = Router::new()
        .route("/healthz", get(|| async { Json(serde_json::json!({ "status": "ok" })) }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/reset", post(reset))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn check_dims(bytes: &[u8], max_side: usize) -> ApiResult<()> {
    let reader = image::ImageReader::with_format(std::io::Cursor::new(bytes), image::ImageFormat::Png);
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ApiError::BadRequest(format!("cannot decode image: {e}")))?;
    if w as usize > max_side || h as usize > max_side {
        return Err(ApiError::TooLarge(format!("image is {w}x{h}, limit is {max_side} per side")));
    }
    Ok(())
}

async fn read_upload(req: Request) -> ApiResult<(Bytes, Option<Bytes>)> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !is_multipart {
        let body = Bytes::from_request(req, &()).await.map_err(|e| ApiError::BadRequest(e.body_text()))?;
        return Ok((body, None));
    }
    let mut mp = Multipart::from_request(req, &()).await.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let (mut image, mut gt) = (None, None);
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::BadRequest(e.body_text()))? {
        let name = field.name().unwrap_or_default().to_owned();
        let data = field.bytes().await.map_err(|e| ApiError::BadRequest(e.body_text()))?;
        match name.as_str() {
            "image" => image = Some(data),
            "gt" => gt = Some(data),
            other => log::warn!("ignoring multipart field {other:?}"),
        }
    }
    let image = image.ok_or_else(|| ApiError::BadRequest("multipart upload without an image field".into()))?;
    Ok((image, gt))
}

async fn create_session(State(st): State<AppState>, req: Request) -> ApiResult<Json<Created>> {
    let (img_bytes, gt_bytes) = read_upload(req).await?;
    let max_side = st.cfg.max_side;
    check_dims(&img_bytes, max_side)?;
    if let Some(g) = &gt_bytes {
        check_dims(g, max_side)?;
    }
    if matches!(st.backend, Backend::GroundTruth) && gt_bytes.is_none() {
        return Err(ApiError::Unprocessable("this server needs a ground truth per session".into()));
    }
    let side = st.cfg.side;
    let session = tokio::task::spawn_blocking(move || -> ApiResult<Session> {
        let image = image_to_tensor(&decode_png(&img_bytes)?);
        let gt = gt_bytes.map(|g| decode_png(&g).map(|d| image_to_mask(&d))).transpose()?;
        Session::new(&image, gt, side)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let (height, width) = (session.geometry.orig_h, session.geometry.orig_w);
    let session_id = st.store.insert(session);
    log::info!("session {session_id} created ({width}x{height})");
    Ok(Json(Created { session_id, width, height }))
}

async fn add_click(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> ApiResult<Json<ClickResponse>> {
    let handle = st.store.get(&id)?;
    let mut guard = handle.lock_owned().await;
    guard.push_click(req.row, req.col, req.positive)?;
    let backend = st.backend.clone();
    let (mut session, result) = tokio::task::spawn_blocking(move || {
        let r = guard.infer(&backend);
        (guard, r)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    if let Err(e) = result {
        session.rollback();
        return Err(e);
    }
    Ok(Json(ClickResponse {
        click_count: session.click_count(),
        iou: session.iou(),
        mask_summary: session.mask().map(MaskSummary::of),
    }))
}

async fn get_mask(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<MaskQuery>) -> ApiResult<Response> {
    let handle = st.store.get(&id)?;
    let session = handle.lock().await;
    let mask = session.mask().ok_or_else(|| ApiError::Conflict("no prediction yet; add a click first".into()))?;
    match q.format.as_deref().unwrap_or("png") {
        "png" => {
            let png = encode_png(&image::DynamicImage::ImageLuma8(mask_to_gray(mask)))?;
            Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
        }
        "rle" => Ok(Json(Rle::encode(mask)).into_response()),
        other => Err(ApiError::BadRequest(format!("unknown mask format {other:?}; use png or rle"))),
    }
}

async fn undo(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ClickResponse>> {
    let handle = st.store.get(&id)?;
    let mut session = handle.lock().await;
    if !session.undo() {
        return Err(ApiError::Conflict("no clicks to undo".into()));
    }
    Ok(Json(ClickResponse {
        click_count: session.click_count(),
        iou: session.iou(),
        mask_summary: session.mask().map(MaskSummary::of),
    }))
}

async fn reset(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ClickResponse>> {
    let handle = st.store.get(&id)?;
    let mut session = handle.lock().await;
    session.reset();
    Ok(Json(ClickResponse { click_count: 0, iou: None, mask_summary: None }))
}

async fn delete_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    if !st.store.remove(&id) {
        return Err(ApiError::NotFound(id));
    }
    log::info!("session {id} deleted");
    Ok(axum::http::StatusCode::NO_CONTENT)
}
