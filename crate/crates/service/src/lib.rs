//! Session-oriented HTTP service for interactive segmentation.
//!
//! Routes:
//! - `POST /session` creates a session from a PNG or a synthetic scene.
//! - `POST /session/{id}/extreme-points` sets the regions and predicts.
//! - `POST /session/{id}/scribbles` appends corrective polylines.
//! - `GET /session/{id}/segmentation[?revision=k]` reads a stored revision.
//!
//! Mutations accept an optional `X-Expected-Revision` header and fail with
//! 409 when the session has moved on. Errors are `{code, message}` JSON.

pub mod api;
pub mod error;
pub mod png;
pub mod session;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use cseg_core::geometry::AnnotationState;
use cseg_core::harness::generate_scene;
use serde::{Deserialize, Serialize};

pub use api::*;
pub use error::{ApiError, ErrorBody};
pub use session::{Model, Session};

pub const EXPECTED_REVISION: &str = "x-expected-revision";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Limit on the decoded PNG payload.
    pub max_upload_bytes: usize,
    pub max_side: usize,
    pub max_regions: usize,
    /// Revisions kept per session for pinned reads.
    pub retained_revisions: usize,
    pub scene_size: usize,
    pub scene_min_regions: usize,
    pub scene_max_regions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: 4 << 20,
            max_side: 512,
            max_regions: 64,
            retained_revisions: 64,
            scene_size: 64,
            scene_min_regions: 2,
            scene_max_regions: 8,
        }
    }
}

type SessionHandle = Arc<Mutex<Session>>;

struct Inner {
    model: Arc<Model>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, SessionHandle>>,
    next_id: AtomicU64,
}

/// Shared server state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(model: Model, config: ServiceConfig) -> Self {
        AppState(Arc::new(Inner {
            model: Arc::new(model),
            config,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    /// Snapshot of a session's annotations, if it has any.
    pub fn annotations(&self, id: &str) -> Option<AnnotationState> {
        let handle = self.handle(id).ok()?;
        let session = handle.lock().ok()?;
        session.annotations().cloned()
    }

    fn handle(&self, id: &str) -> Result<SessionHandle, ApiError> {
        let map = self.0.sessions.read().map_err(|_| ApiError::internal("session table poisoned"))?;
        map.get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id}")))
    }

    fn insert(&self, image: cseg_core::Tensor<f32>) -> Result<SessionCreated, ApiError> {
        let id = format!("s{}", self.0.next_id.fetch_add(1, Ordering::SeqCst));
        let session = Session::new(id.clone(), image, self.0.config.retained_revisions);
        let created = SessionCreated {
            session_id: id.clone(),
            width: session.width(),
            height: session.height(),
            revision: 0,
        };
        let mut map = self.0.sessions.write().map_err(|_| ApiError::internal("session table poisoned"))?;
        map.insert(id, Arc::new(Mutex::new(session)));
        Ok(created)
    }
}

pub fn router(state: AppState) -> Router {
    // Base64 inflates by 4/3; leave room for the JSON around it.
    let body_limit = state.config().max_upload_bytes / 3 * 4 + 64 * 1024;
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/extreme-points", post(submit_extreme_points))
        .route("/session/{id}/scribbles", post(submit_scribbles))
        .route("/session/{id}/segmentation", get(get_segmentation))
        .fallback(|| async { ApiError::not_found("unknown_route", "no such route") })
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Serves `state` on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    (StatusCode::OK, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn expected_revision(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    headers
        .get(EXPECTED_REVISION)
        .map(|v| {
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| ApiError::bad_request("bad_request", "X-Expected-Revision must be an integer"))
        })
        .transpose()
}

/// Runs a session operation on the blocking pool under the session lock.
async fn with_session<T, F>(state: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, &Model, &ServiceConfig) -> Result<T, ApiError> + Send + 'static,
{
    let handle = state.handle(id)?;
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut session = handle.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
        f(&mut session, &state.0.model, &state.0.config)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionCreated>, ApiError> {
    let Json(req) = body?;
    let cfg = state.config();
    let image = match req {
        CreateSession::ImagePng(b64) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.as_bytes())
                .map_err(|e| ApiError::bad_request("decode_error", format!("bad base64: {e}")))?;
            if bytes.len() > cfg.max_upload_bytes {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    "payload_too_large",
                    format!("{} bytes, limit is {}", bytes.len(), cfg.max_upload_bytes),
                ));
            }
            png::decode_image(&bytes, cfg.max_side)?
        }
        CreateSession::Scene(s) => {
            generate_scene(cfg.scene_size, s.seed, s.index, cfg.scene_min_regions..=cfg.scene_max_regions)?.image
        }
    };
    let reduction = state.0.model.params.config.reduction();
    let (h, w, _) = image.dims3();
    if h % reduction != 0 || w % reduction != 0 {
        return Err(ApiError::bad_request(
            "invalid_image",
            format!("image {w}x{h} must have sides divisible by {reduction}"),
        ));
    }
    let created = state.insert(image)?;
    tracing::info!(session = %created.session_id, w, h, "session created");
    Ok(Json(created))
}

async fn submit_extreme_points(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<ExtremePointsRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let expected = expected_revision(&headers)?;
    let bytes = with_session(&state, &id, move |s, model, cfg| {
        s.submit_extreme_points(&req.regions, model, cfg.max_regions, expected)
    })
    .await?;
    tracing::info!(session = %id, "extreme points accepted");
    Ok(json_bytes(bytes))
}

async fn submit_scribbles(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<ScribblesRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let expected = expected_revision(&headers)?;
    let bytes = with_session(&state, &id, move |s, model, _| s.submit_scribbles(&req.scribbles, model, expected)).await?;
    tracing::info!(session = %id, "scribbles accepted");
    Ok(json_bytes(bytes))
}

async fn get_segmentation(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<SegmentationQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query?;
    let handle = state.handle(&id)?;
    let session = handle.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
    Ok(json_bytes(session.segmentation(q.revision)?))
}
