//! Request and response bodies of the JSON protocol.

use cseg_core::geometry::ExtremePoints;
use serde::{Deserialize, Serialize};

/// `POST /session`: either `{"image_png": "<base64>"}` or
/// `{"scene": {"seed": 7, "index": 0}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CreateSession {
    ImagePng(String),
    Scene(SceneRef),
}

/// A synthetic scene, generated with the service's scene settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRef {
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub revision: u64,
}

/// One quadruple per region; region ids are assigned 1..N in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtremePointsRequest {
    pub regions: Vec<ExtremePoints>,
}

/// A free-hand polyline in pixel coordinates, `[[x, y], ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScribbleInput {
    pub region_id: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScribblesRequest {
    pub scribbles: Vec<ScribbleInput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region_id: usize,
    /// Pixels the region wins.
    pub pixels: usize,
    /// Mean probability of the region over the whole image.
    pub mean_probability: f64,
    /// Mean probability of the region over the pixels it wins.
    pub mean_confidence: f64,
}

/// Body of every successful mutation and of `GET .../segmentation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResponse {
    pub session_id: String,
    pub revision: u64,
    pub width: usize,
    pub height: usize,
    pub num_regions: usize,
    /// Base64 16-bit grayscale PNG holding region ids 1..N.
    pub labels_png: String,
    pub regions: Vec<RegionSummary>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationQuery {
    pub revision: Option<u64>,
}
