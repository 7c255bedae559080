#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use cseg_core::annotator::InferenceOptions;
use cseg_core::model::{ModelConfig, ModelParams, Segmentation};
use cseg_service::png::decode_labels;
use cseg_service::{router, AppState, ErrorBody, Model, SegmentationResponse, ServiceConfig, SessionCreated};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn untrained_model() -> Model {
    Model {
        params: ModelParams::init(&ModelConfig::default(), 5).unwrap(),
        options: InferenceOptions::default(),
    }
}

pub fn app(model: Model, config: ServiceConfig) -> (AppState, Router) {
    let state = AppState::new(model, config);
    (state.clone(), router(state))
}

pub fn default_app() -> (AppState, Router) {
    app(untrained_model(), ServiceConfig::default())
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, expected: Option<u64>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(r) = expected {
        req = req.header(cseg_service::EXPECTED_REVISION, r.to_string());
    }
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", uri, Some(body), None).await
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, "GET", uri, None, None).await
}

pub fn error_code(bytes: &[u8]) -> String {
    serde_json::from_slice::<ErrorBody>(bytes).unwrap().code
}

pub fn segmentation(bytes: &[u8]) -> SegmentationResponse {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

/// Decoded labels of a segmentation response.
pub fn labels(resp: &SegmentationResponse) -> Segmentation {
    let png = base64::engine::general_purpose::STANDARD.decode(&resp.labels_png).unwrap();
    let (w, h, labels) = decode_labels(&png).unwrap();
    assert_eq!((w, h), (resp.width, resp.height));
    Segmentation::new(w, h, resp.num_regions, labels).unwrap()
}

pub async fn scene_session(app: &Router, seed: u64, index: u64) -> SessionCreated {
    let (status, body) = post(app, "/session", json!({"scene": {"seed": seed, "index": index}})).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

pub fn quad(x0: usize, y0: usize, x1: usize, y1: usize) -> Value {
    let (mx, my) = ((x0 + x1) / 2, (y0 + y1) / 2);
    json!({
        "left": {"x": x0, "y": my},
        "right": {"x": x1, "y": my},
        "top": {"x": mx, "y": y0},
        "bottom": {"x": mx, "y": y1},
    })
}

/// Three regions tiling a 64x64 image: left half, top right, bottom right.
pub fn three_regions() -> Value {
    json!({"regions": [quad(0, 0, 31, 63), quad(32, 0, 63, 31), quad(32, 32, 63, 63)]})
}
