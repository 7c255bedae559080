use std::collections::VecDeque;

use base64::Engine;
use cseg_core::annotator::InferenceOptions;
use cseg_core::geometry::{AnnotationState, ExtremePoints, PointF, Stroke};
use cseg_core::model::{predict_segmentation, ModelParams, ProbCanvas, Segmentation};
use cseg_core::Tensor;

use crate::api::{RegionSummary, ScribbleInput, SegmentationResponse};
use crate::error::ApiError;
use crate::png::encode_labels;

/// Read-only model shared by every session.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ModelParams<f32>,
    pub options: InferenceOptions,
}

/// One annotator's image and everything submitted for it.
///
/// Each accepted mutation stores the serialized response of the new
/// revision, so reads return exactly the bytes the mutation returned.
#[derive(Debug)]
pub struct Session {
    id: String,
    image: Tensor<f32>,
    annotations: Option<AnnotationState>,
    latest: Option<Segmentation>,
    revision: u64,
    history: VecDeque<(u64, Vec<u8>)>,
    retain: usize,
}

impl Session {
    pub fn new(id: String, image: Tensor<f32>, retain: usize) -> Self {
        Session {
            id,
            image,
            annotations: None,
            latest: None,
            revision: 0,
            history: VecDeque::new(),
            retain: retain.max(1),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn width(&self) -> usize {
        self.image.dims3().1
    }

    pub fn height(&self) -> usize {
        self.image.dims3().0
    }

    pub fn annotations(&self) -> Option<&AnnotationState> {
        self.annotations.as_ref()
    }

    fn check_revision(&self, expected: Option<u64>) -> Result<(), ApiError> {
        match expected {
            Some(r) if r != self.revision => Err(ApiError::conflict(
                "stale_revision",
                format!("expected revision {r}, session is at {}", self.revision),
            )),
            _ => Ok(()),
        }
    }

    pub fn submit_extreme_points(
        &mut self,
        regions: &[ExtremePoints],
        model: &Model,
        max_regions: usize,
        expected: Option<u64>,
    ) -> Result<Vec<u8>, ApiError> {
        self.check_revision(expected)?;
        if self.annotations.is_some() {
            return Err(ApiError::conflict("already_initialized", "extreme points were already submitted"));
        }
        if regions.is_empty() || regions.len() > max_regions {
            return Err(ApiError::bad_request(
                "invalid_points",
                format!("need 1..={max_regions} regions, got {}", regions.len()),
            ));
        }
        let (w, h) = (self.width(), self.height());
        for (i, ep) in regions.iter().enumerate() {
            ep.validate(w, h)
                .map_err(|e| ApiError::bad_request("invalid_points", format!("region {}: {e}", i + 1)))?;
        }
        let state = AnnotationState::from_extreme_points(w, h, regions.to_vec());
        let (seg, probs) = self.predict(&state, model)?;
        self.annotations = Some(state);
        Ok(self.commit(seg, &probs, Vec::new()))
    }

    /// Appends the strokes and re-predicts. An empty list changes nothing
    /// and returns the current revision.
    pub fn submit_scribbles(
        &mut self,
        scribbles: &[ScribbleInput],
        model: &Model,
        expected: Option<u64>,
    ) -> Result<Vec<u8>, ApiError> {
        self.check_revision(expected)?;
        let (Some(state), Some(latest)) = (&self.annotations, &self.latest) else {
            return Err(ApiError::conflict("no_prediction", "submit extreme points first"));
        };
        if scribbles.is_empty() {
            return self.segmentation(None);
        }
        let (w, h) = (self.width(), self.height());
        let mut strokes = Vec::with_capacity(scribbles.len());
        let mut warnings = Vec::new();
        for (k, s) in scribbles.iter().enumerate() {
            if s.region_id == 0 || s.region_id > state.num_regions() {
                return Err(ApiError::bad_request(
                    "unknown_region",
                    format!("scribble {k}: region {} not in 1..={}", s.region_id, state.num_regions()),
                ));
            }
            if s.points.is_empty() {
                return Err(ApiError::bad_request("empty_scribble", format!("scribble {k} has no points")));
            }
            let points: Vec<PointF> = s.points.iter().map(|&[x, y]| PointF::new(x, y)).collect();
            let stroke = Stroke::new(s.region_id, points, w, h)
                .map_err(|e| ApiError::bad_request("invalid_scribble", format!("scribble {k}: {e}")))?;
            let [x, y] = s.points[0];
            let (px, py) = (clamp_pixel(x, w), clamp_pixel(y, h));
            if latest.get(px, py) != s.region_id {
                warnings.push(format!(
                    "scribble {k} starts at ({px}, {py}) outside the current prediction of region {}",
                    s.region_id
                ));
            }
            strokes.push(stroke);
        }
        let mut next = state.clone();
        next.strokes.extend(strokes);
        let (seg, probs) = self.predict(&next, model)?;
        self.annotations = Some(next);
        Ok(self.commit(seg, &probs, warnings))
    }

    /// Stored response of `revision`, or of the latest one.
    pub fn segmentation(&self, revision: Option<u64>) -> Result<Vec<u8>, ApiError> {
        if self.history.is_empty() {
            return Err(ApiError::not_found("no_prediction", format!("session {} has no prediction yet", self.id)));
        }
        let want = revision.unwrap_or(self.revision);
        self.history
            .iter()
            .find(|(r, _)| *r == want)
            .map(|(_, body)| body.clone())
            .ok_or_else(|| ApiError::not_found("unknown_revision", format!("revision {want} is not retained")))
    }

    fn predict(&self, state: &AnnotationState, model: &Model) -> Result<(Segmentation, ProbCanvas<f32>), ApiError> {
        let boxes = state.boxes(model.options.box_margin)?;
        let pairs = state.region_pairs(model.options.sharing.is_shared())?;
        Ok(predict_segmentation(&self.image, &boxes, &pairs, &model.params)?)
    }

    fn commit(&mut self, seg: Segmentation, probs: &ProbCanvas<f32>, warnings: Vec<String>) -> Vec<u8> {
        self.revision += 1;
        let body = SegmentationResponse {
            session_id: self.id.clone(),
            revision: self.revision,
            width: seg.width(),
            height: seg.height(),
            num_regions: seg.num_regions(),
            labels_png: base64::engine::general_purpose::STANDARD.encode(encode_labels(&seg)),
            regions: summarize(&seg, probs),
            warnings,
        };
        let bytes = serde_json::to_vec(&body).expect("response serializes");
        self.history.push_back((self.revision, bytes.clone()));
        while self.history.len() > self.retain {
            self.history.pop_front();
        }
        self.latest = Some(seg);
        bytes
    }
}

fn clamp_pixel(v: f64, n: usize) -> usize {
    v.round().clamp(0.0, (n - 1) as f64) as usize
}

fn summarize(seg: &Segmentation, probs: &ProbCanvas<f32>) -> Vec<RegionSummary> {
    let n = seg.num_regions();
    let mut pixels = vec![0usize; n];
    let mut total = vec![0f64; n];
    let mut won = vec![0f64; n];
    for (p, &l) in seg.labels().iter().enumerate() {
        let px = &probs.tensor().data()[p * n..(p + 1) * n];
        for (i, &v) in px.iter().enumerate() {
            total[i] += v as f64;
        }
        let i = l as usize - 1;
        pixels[i] += 1;
        won[i] += px[i] as f64;
    }
    let area = seg.labels().len() as f64;
    (0..n)
        .map(|i| RegionSummary {
            region_id: i + 1,
            pixels: pixels[i],
            mean_probability: total[i] / area,
            mean_confidence: if pixels[i] == 0 { 0.0 } else { won[i] / pixels[i] as f64 },
        })
        .collect()
}
