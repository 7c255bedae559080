mod common;

use axum::http::StatusCode;
use base64::Engine;
use common::*;
use cseg_core::geometry::{rasterize_polyline, PointF};
use cseg_core::harness::generate_scene;
use cseg_core::Tensor;
use cseg_service::png::encode_image;
use cseg_service::{ServiceConfig, SessionCreated};
use serde_json::json;

fn png_b64(w: usize, h: usize) -> String {
    let data = (0..w * h * 3).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
    let img = Tensor::new(vec![h, w, 3], data).unwrap();
    base64::engine::general_purpose::STANDARD.encode(encode_image(&img))
}

#[tokio::test]
async fn png_sessions_get_fresh_ids() {
    let (_, app) = default_app();
    let png = png_b64(64, 64);
    let (s1, b1) = post(&app, "/session", json!({"image_png": png})).await;
    let (s2, b2) = post(&app, "/session", json!({"image_png": png})).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let a: SessionCreated = serde_json::from_slice(&b1).unwrap();
    let b: SessionCreated = serde_json::from_slice(&b2).unwrap();
    assert_ne!(a.session_id, b.session_id);
    assert_eq!((a.width, a.height, a.revision), (64, 64, 0));
}

#[tokio::test]
async fn bad_uploads_are_rejected_with_a_reason() {
    let config = ServiceConfig {
        max_upload_bytes: 2000,
        max_side: 96,
        ..ServiceConfig::default()
    };
    let (_, app) = app(untrained_model(), config);
    let (status, body) = post(&app, "/session", json!({"image_png": ""})).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "decode_error"));
    let (status, body) = post(&app, "/session", json!({"image_png": "aGVsbG8="})).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "decode_error"));
    let (status, body) = post(&app, "/session", json!({"image_png": png_b64(64, 64)})).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large"));
    let (status, body) = post(&app, "/session", json!({"image_png": png_b64(128, 4)})).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::PAYLOAD_TOO_LARGE, "image_too_large"));
    let (status, body) = post(&app, "/session", json!({"image_png": png_b64(10, 12)})).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "invalid_image"));
    let (status, body) = post(&app, "/session", json!({"nonsense": 1})).await;
    assert!(status.is_client_error());
    assert_eq!(error_code(&body), "bad_request");
}

#[tokio::test]
async fn one_region_labels_everything_one() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    let uri = format!("/session/{}/extreme-points", s.session_id);
    let (status, body) = post(&app, &uri, json!({"regions": [quad(10, 12, 40, 50)]})).await;
    assert_eq!(status, StatusCode::OK);
    let resp = segmentation(&body);
    assert_eq!((resp.revision, resp.num_regions), (1, 1));
    assert!(labels(&resp).labels().iter().all(|&l| l == 1));
    assert_eq!(resp.regions[0].pixels, 64 * 64);
    assert!((resp.regions[0].mean_probability - 1.0).abs() < 1e-6);
}

#[tokio::test]
async fn scene_sessions_partition_the_scene() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 1).await;
    let scene = generate_scene(64, 3, 1, 2..=8).unwrap();
    assert_eq!((s.width, s.height), (scene.labels.width(), scene.labels.height()));
    let uri = format!("/session/{}/extreme-points", s.session_id);
    let resp = segmentation(&post(&app, &uri, three_regions()).await.1);
    assert_eq!((resp.width, resp.height, resp.num_regions), (64, 64, 3));
    let seg = labels(&resp);
    assert!(seg.labels().iter().all(|&l| (1..=3).contains(&l)));
    assert_eq!(resp.regions.iter().map(|r| r.pixels).sum::<usize>(), 64 * 64);
    let total: f64 = resp.regions.iter().map(|r| r.mean_probability).sum();
    assert!((total - 1.0).abs() < 1e-5, "{total}");
}

#[tokio::test]
async fn identical_points_give_identical_bytes() {
    let (_, app) = default_app();
    let (a, b) = (scene_session(&app, 3, 2).await, scene_session(&app, 3, 2).await);
    let ra = segmentation(&post(&app, &format!("/session/{}/extreme-points", a.session_id), three_regions()).await.1);
    let rb = segmentation(&post(&app, &format!("/session/{}/extreme-points", b.session_id), three_regions()).await.1);
    assert_eq!(ra.labels_png, rb.labels_png);
    assert_eq!(ra.regions, rb.regions);
}

#[tokio::test]
async fn malformed_points_and_unknown_sessions() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    let uri = format!("/session/{}/extreme-points", s.session_id);
    let (status, body) = post(&app, &uri, json!({"regions": []})).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "invalid_points"));
    let (status, body) = post(&app, &uri, json!({"regions": [quad(10, 10, 70, 20)]})).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "invalid_points"));
    let swapped = json!({"regions": [{
        "left": {"x": 30, "y": 5}, "right": {"x": 10, "y": 5}, "top": {"x": 20, "y": 0}, "bottom": {"x": 20, "y": 9},
    }]});
    let (status, body) = post(&app, &uri, swapped).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "invalid_points"));
    let (status, body) = post(&app, "/session/nope/extreme-points", three_regions()).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_session"));
    let (status, body) = get(&app, "/session/nope/segmentation").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_session"));
    let (status, body) = get(&app, &format!("/session/{}/segmentation", s.session_id)).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "no_prediction"));
    // Accepted once; the region set is then fixed for the session.
    assert_eq!(post(&app, &uri, three_regions()).await.0, StatusCode::OK);
    let (status, body) = post(&app, &uri, three_regions()).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::CONFLICT, "already_initialized"));
}

#[tokio::test]
async fn scribble_validation() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    let uri = format!("/session/{}/scribbles", s.session_id);
    let one = json!({"scribbles": [{"region_id": 1, "points": [[5.0, 5.0]]}]});
    let (status, body) = post(&app, &uri, one.clone()).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::CONFLICT, "no_prediction"));
    post(&app, &format!("/session/{}/extreme-points", s.session_id), three_regions()).await;
    for (bad, code) in [
        (json!({"scribbles": [{"region_id": 4, "points": [[5.0, 5.0]]}]}), "unknown_region"),
        (json!({"scribbles": [{"region_id": 0, "points": [[5.0, 5.0]]}]}), "unknown_region"),
        (json!({"scribbles": [{"region_id": 2, "points": []}]}), "empty_scribble"),
    ] {
        let (status, body) = post(&app, &uri, bad).await;
        assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, code));
    }
    // Rejected batches leave no trace.
    let mixed = json!({"scribbles": [{"region_id": 1, "points": [[5.0, 5.0]]}, {"region_id": 9, "points": [[1.0, 1.0]]}]});
    assert_eq!(post(&app, &uri, mixed).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(segmentation(&get(&app, &format!("/session/{}/segmentation", s.session_id)).await.1).revision, 1);
}

#[tokio::test]
async fn empty_scribble_list_changes_nothing() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    let (_, first) = post(&app, &format!("/session/{}/extreme-points", s.session_id), three_regions()).await;
    let (status, again) = post(&app, &format!("/session/{}/scribbles", s.session_id), json!({"scribbles": []})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first, again);
    assert_eq!(segmentation(&again).revision, 1);
}

#[tokio::test]
async fn scribble_lands_in_every_other_negative_channel() {
    let (state, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    post(&app, &format!("/session/{}/extreme-points", s.session_id), three_regions()).await;
    let before = state.annotations(&s.session_id).unwrap().region_pairs(true).unwrap();
    let points = [[40.0, 10.0], [50.0, 14.5], [58.2, 20.0]];
    let body = json!({"scribbles": [{"region_id": 2, "points": points}]});
    let (status, resp) = post(&app, &format!("/session/{}/scribbles", s.session_id), body).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(segmentation(&resp).revision, 2);
    let after = state.annotations(&s.session_id).unwrap().region_pairs(true).unwrap();
    let poly: Vec<PointF> = points.iter().map(|&[x, y]| PointF::new(x, y)).collect();
    let stroke = rasterize_polyline(&poly, 64, 64);
    for region in [0, 2] {
        let mut want = before[region].negative.clone();
        want.union_with(&stroke);
        assert_eq!(after[region].negative, want, "region {}", region + 1);
        assert_eq!(after[region].positive, before[region].positive);
    }
    let mut want = before[1].positive.clone();
    want.union_with(&stroke);
    assert_eq!(after[1].positive, want);
    assert_eq!(after[1].negative, before[1].negative);
}

#[tokio::test]
async fn reads_match_mutations_and_pin_old_revisions() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    let seg_uri = format!("/session/{}/segmentation", s.session_id);
    let (_, rev1) = post(&app, &format!("/session/{}/extreme-points", s.session_id), three_regions()).await;
    assert_eq!(get(&app, &seg_uri).await.1, rev1);
    let body = json!({"scribbles": [{"region_id": 1, "points": [[5.0, 40.0], [20.0, 44.0]]}]});
    let (_, rev2) = post(&app, &format!("/session/{}/scribbles", s.session_id), body).await;
    assert_eq!(get(&app, &seg_uri).await.1, rev2);
    assert_eq!(get(&app, &format!("{seg_uri}?revision=1")).await.1, rev1);
    assert_eq!(get(&app, &format!("{seg_uri}?revision=2")).await.1, rev2);
    let (status, body) = get(&app, &format!("{seg_uri}?revision=7")).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_revision"));
    let (status, body) = get(&app, &format!("{seg_uri}?revision=x")).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
}

#[tokio::test]
async fn old_revisions_expire_past_the_retention_limit() {
    let config = ServiceConfig {
        retained_revisions: 2,
        ..ServiceConfig::default()
    };
    let (_, app) = app(untrained_model(), config);
    let s = scene_session(&app, 3, 0).await;
    post(&app, &format!("/session/{}/extreme-points", s.session_id), three_regions()).await;
    for x in [5.0, 9.0] {
        let body = json!({"scribbles": [{"region_id": 1, "points": [[x, 40.0]]}]});
        post(&app, &format!("/session/{}/scribbles", s.session_id), body).await;
    }
    let seg_uri = format!("/session/{}/segmentation", s.session_id);
    assert_eq!(get(&app, &format!("{seg_uri}?revision=1")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, &format!("{seg_uri}?revision=2")).await.0, StatusCode::OK);
    assert_eq!(get(&app, &format!("{seg_uri}?revision=3")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn stale_expected_revision_is_rejected() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    let ep = format!("/session/{}/extreme-points", s.session_id);
    let (status, body) = call(&app, "POST", &ep, Some(three_regions()), Some(3)).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::CONFLICT, "stale_revision"));
    assert_eq!(call(&app, "POST", &ep, Some(three_regions()), Some(0)).await.0, StatusCode::OK);
    let sc = format!("/session/{}/scribbles", s.session_id);
    let body = json!({"scribbles": [{"region_id": 3, "points": [[50.0, 50.0]]}]});
    assert_eq!(call(&app, "POST", &sc, Some(body.clone()), Some(1)).await.0, StatusCode::OK);
    // A second client still holding revision 1 loses.
    let (status, resp) = call(&app, "POST", &sc, Some(body.clone()), Some(1)).await;
    assert_eq!((status, error_code(&resp).as_str()), (StatusCode::CONFLICT, "stale_revision"));
    assert_eq!(call(&app, "POST", &sc, Some(body), Some(2)).await.0, StatusCode::OK);
    let (status, resp) = call(&app, "POST", &sc, Some(json!({"scribbles": []})), Some(99)).await;
    assert_eq!((status, error_code(&resp).as_str()), (StatusCode::CONFLICT, "stale_revision"));
}

#[tokio::test]
async fn off_region_starts_warn_but_apply() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    let (_, rev1) = post(&app, &format!("/session/{}/extreme-points", s.session_id), three_regions()).await;
    let seg = labels(&segmentation(&rev1));
    // Pick a pixel the prediction gives to some region, then claim it for another.
    let owner = seg.get(48, 48);
    let other = if owner == 1 { 2 } else { 1 };
    let body = json!({"scribbles": [{"region_id": other, "points": [[48.0, 48.0], [50.0, 50.0]]}]});
    let (status, resp) = post(&app, &format!("/session/{}/scribbles", s.session_id), body).await;
    assert_eq!(status, StatusCode::OK);
    let resp = segmentation(&resp);
    assert_eq!(resp.revision, 2);
    assert_eq!(resp.warnings.len(), 1, "{:?}", resp.warnings);
}

/// Runs one fixed transcript against a fresh server and returns every body.
async fn transcript(seed: u64) -> Vec<Vec<u8>> {
    let (_, app) = default_app();
    let mut out = Vec::new();
    let (_, created) = post(&app, "/session", json!({"scene": {"seed": seed, "index": 4}})).await;
    out.push(created);
    let (_, b) = post(&app, "/session/s1/extreme-points", three_regions()).await;
    out.push(b);
    for (k, region) in [2usize, 1, 3].into_iter().enumerate() {
        let x = 10.0 + 15.0 * k as f64;
        let body = json!({"scribbles": [{"region_id": region, "points": [[x, 20.0], [x + 4.0, 30.0], [x, 40.0]]}]});
        out.push(call(&app, "POST", "/session/s1/scribbles", Some(body), Some(k as u64 + 1)).await.1);
    }
    out.push(get(&app, "/session/s1/segmentation?revision=2").await.1);
    out
}

#[tokio::test]
async fn transcripts_replay_byte_identically_across_restarts() {
    let first = transcript(3).await;
    let second = transcript(3).await;
    assert_eq!(first, second);
    assert_eq!(segmentation(&first[4]).revision, 4);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_do_not_interfere() {
    let (_, app) = default_app();
    let mut ids = Vec::new();
    for index in 0..4 {
        ids.push(scene_session(&app, 3, index).await.session_id);
    }
    let run = |app: axum::Router, id: String| async move {
        let mut bodies = vec![post(&app, &format!("/session/{id}/extreme-points"), three_regions()).await.1];
        for y in [10.0, 30.0, 50.0] {
            let body = json!({"scribbles": [{"region_id": 1, "points": [[8.0, y], [20.0, y]]}]});
            bodies.push(post(&app, &format!("/session/{id}/scribbles"), body).await.1);
        }
        bodies
    };
    let handles: Vec<_> = ids.iter().map(|id| tokio::spawn(run(app.clone(), id.clone()))).collect();
    let mut concurrent = Vec::new();
    for h in handles {
        concurrent.push(h.await.unwrap());
    }
    // The same work done alone on a fresh server.
    let (_, solo_app) = default_app();
    for (index, bodies) in concurrent.iter().enumerate() {
        let id = scene_session(&solo_app, 3, index as u64).await.session_id;
        assert_eq!(&run(solo_app.clone(), id).await, bodies);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn racing_mutations_on_one_session_serialize() {
    let (_, app) = default_app();
    let s = scene_session(&app, 3, 0).await;
    post(&app, &format!("/session/{}/extreme-points", s.session_id), three_regions()).await;
    let uri = format!("/session/{}/scribbles", s.session_id);
    let handles: Vec<_> = (0..6)
        .map(|k| {
            let (app, uri) = (app.clone(), uri.clone());
            tokio::spawn(async move {
                let body = json!({"scribbles": [{"region_id": 1, "points": [[4.0 + k as f64, 60.0]]}]});
                call(&app, "POST", &uri, Some(body), Some(1)).await.0
            })
        })
        .collect();
    let mut statuses = Vec::new();
    for h in handles {
        statuses.push(h.await.unwrap());
    }
    assert_eq!(statuses.iter().filter(|&&s| s == StatusCode::OK).count(), 1, "{statuses:?}");
    assert_eq!(statuses.iter().filter(|&&s| s == StatusCode::CONFLICT).count(), 5);
}

#[tokio::test]
async fn unknown_routes_use_the_error_body() {
    let (_, app) = default_app();
    let (status, body) = get(&app, "/nowhere").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_route"));
}
