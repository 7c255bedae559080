//! A scripted annotator drives a session over HTTP against a small model
//! trained from a fixed seed.

mod common;

use axum::http::StatusCode;
use common::*;
use cseg_core::annotator::{allocate_scribbles, simulate_annotations, AllocationStrategy};
use cseg_core::geometry::InterpolatingBezier;
use cseg_core::harness::{build_stage2, generate_scene, generate_split, inference_options, train_stage1, ExperimentConfig, Split, EVAL_OFFSET};
use cseg_core::model::mean_region_iou;
use cseg_service::{Model, ServiceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEED: u64 = 7;
const SIZE: usize = 32;

fn trained_model() -> Model {
    let mut cfg = ExperimentConfig::new(SEED);
    cfg.data.size = SIZE;
    cfg.data.train_count = 60;
    cfg.data.interactive_count = 30;
    cfg.train.stage1_steps = 600;
    cfg.train.stage2_steps = 400;
    let train = generate_split(&cfg, Split::Train).unwrap();
    let stage1 = train_stage1(&train, &cfg, None).unwrap().params;
    Model {
        params: build_stage2(&cfg, &stage1, None).unwrap(),
        options: inference_options(&cfg.train),
    }
}

/// Polyline through a simulated scribble's curve.
fn polyline(s: &cseg_core::geometry::Scribble) -> Vec<[f64; 2]> {
    let [a, b, c] = s.control_points;
    let curve = InterpolatingBezier::through(a, b, c);
    (0..=24).map(|i| curve.at(i as f64 / 24.0)).map(|p| [p.x, p.y]).collect()
}

#[tokio::test]
async fn scripted_session_never_loses_iou() {
    let config = ServiceConfig {
        scene_size: SIZE,
        ..ServiceConfig::default()
    };
    let (_, app) = app(trained_model(), config);
    let scene = generate_scene(SIZE, SEED, EVAL_OFFSET, 2..=8).unwrap();
    let gt = &scene.labels;
    let s = scene_session(&app, SEED, EVAL_OFFSET).await;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let ann = simulate_annotations(gt, 0, &mut rng).unwrap();
    let (status, body) = post(&app, &format!("/session/{}/extreme-points", s.session_id), json!({"regions": ann.extreme_points})).await;
    assert_eq!(status, StatusCode::OK);
    let mut resp = segmentation(&body);
    let mut ious = vec![mean_region_iou(&labels(&resp), gt).unwrap().mean];
    for _ in 0..3 {
        let pred = labels(&resp);
        let scribbles = allocate_scribbles(&pred, gt, &AllocationStrategy::fixed(), &mut rng).unwrap();
        let batch: Vec<_> = scribbles.iter().map(|s| json!({"region_id": s.region_id, "points": polyline(s)})).collect();
        let uri = format!("/session/{}/scribbles", s.session_id);
        let (status, body) = call(&app, "POST", &uri, Some(json!({"scribbles": batch})), Some(resp.revision)).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        resp = segmentation(&body);
        ious.push(mean_region_iou(&labels(&resp), gt).unwrap().mean);
    }
    eprintln!("scripted session mean IoU by round: {ious:?}");
    for pair in ious.windows(2) {
        assert!(pair[1] >= pair[0], "IoU dropped: {ious:?}");
    }
    assert!(ious[3] > ious[0], "{ious:?}");
}
