//! Simulated annotator: extreme points from ground truth, error regions of a
//! prediction, corrective scribbles and their allocation across regions.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnnotationMap, AnnotationState, BBox, ExtremePoints, Point, PointF, Scribble};
use crate::model::{predict_segmentation, IouCounts, ModelParams, RegionIou, RegionLabelMap, Segmentation, Sharing};
use crate::tensor::{Real, Tensor};

/// Attempts per scribble; the longest valid attempt wins.
pub const SCRIBBLE_ATTEMPTS: usize = 10;

const NEIGHBORS4: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors4(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS4.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then_some((nx as usize, ny as usize))
    })
}

fn on_boundary(mask: &AnnotationMap, x: usize, y: usize) -> bool {
    let (w, h) = (mask.width(), mask.height());
    x == 0 || y == 0 || x + 1 == w || y + 1 == h || neighbors4(x, y, w, h).any(|(nx, ny)| !mask.get(nx, ny))
}

/// Left/right/top/bottom-most pixels of `mask`. Ties go to the smallest other
/// coordinate. With `jitter > 0` each point moves to a uniformly chosen mask
/// boundary pixel reachable within `jitter` steps along the boundary.
pub fn simulate_extreme_points<R: Rng + ?Sized>(mask: &AnnotationMap, jitter: usize, rng: &mut R) -> Result<ExtremePoints> {
    let pixels: Vec<Point> = mask.pixels().map(|(x, y)| Point::new(x, y)).collect();
    if pixels.is_empty() {
        return Err(Error::InvalidInput("extreme points of an empty mask".into()));
    }
    let pick = |key: fn(&Point) -> (i64, i64)| *pixels.iter().min_by_key(|p| key(p)).expect("non-empty");
    let mut ep = ExtremePoints {
        left: pick(|p| (p.x as i64, p.y as i64)),
        right: pick(|p| (-(p.x as i64), p.y as i64)),
        top: pick(|p| (p.y as i64, p.x as i64)),
        bottom: pick(|p| (-(p.y as i64), p.x as i64)),
    };
    if jitter > 0 {
        for p in [&mut ep.left, &mut ep.right, &mut ep.top, &mut ep.bottom] {
            let reach = boundary_neighborhood(mask, *p, jitter);
            *p = reach[rng.random_range(0..reach.len())];
        }
    }
    Ok(ep)
}

/// Boundary pixels within `steps` 8-connected moves along the boundary.
fn boundary_neighborhood(mask: &AnnotationMap, start: Point, steps: usize) -> Vec<Point> {
    let (w, h) = (mask.width(), mask.height());
    let mut dist = vec![usize::MAX; w * h];
    let mut out = vec![start];
    let mut queue = VecDeque::from([start]);
    dist[start.y * w + start.x] = 0;
    while let Some(p) = queue.pop_front() {
        let d = dist[p.y * w + p.x];
        if d == steps {
            continue;
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (p.x as i64 + dx, p.y as i64 + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if dist[ny * w + nx] != usize::MAX || !mask.get(nx, ny) || !on_boundary(mask, nx, ny) {
                    continue;
                }
                dist[ny * w + nx] = d + 1;
                out.push(Point::new(nx, ny));
                queue.push_back(Point::new(nx, ny));
            }
        }
    }
    out
}

/// Extreme points of every ground-truth region.
pub fn simulate_annotations<R: Rng + ?Sized>(gt: &RegionLabelMap, jitter: usize, rng: &mut R) -> Result<AnnotationState> {
    let eps = (1..=gt.num_regions())
        .map(|r| simulate_extreme_points(&gt.mask(r), jitter, rng))
        .collect::<Result<_>>()?;
    Ok(AnnotationState::from_extreme_points(gt.width(), gt.height(), eps))
}

/// A 4-connected group of pixels of ground-truth region `gt_region_id` that
/// the prediction assigns elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRegion {
    pub gt_region_id: usize,
    pub pixels: Vec<(usize, usize)>,
    /// Mean IoU gain if the region were fully corrected.
    pub importance: f64,
}

fn check_same_dims(pred: &Segmentation, gt: &RegionLabelMap) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// IoU gain of reassigning `pixels` to `region`, from precomputed counts.
fn gain_from_counts(counts: &IouCounts, base: f64, region: usize, pixels: &[(usize, usize)], pred: &Segmentation) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let mut c = counts.clone();
    for &(x, y) in pixels {
        let q = pred.get(x, y);
        if q == region {
            continue;
        }
        c.predicted[q - 1] -= 1;
        c.predicted[region - 1] += 1;
        c.intersection[region - 1] += 1;
    }
    c.mean() - base
}

/// `mean IoU(pred with err reassigned to its ground-truth region) - mean IoU(pred)`.
pub fn error_importance(err: &ErrorRegion, pred: &Segmentation, gt: &RegionLabelMap) -> Result<f64> {
    let counts = IouCounts::new(pred, gt)?;
    let base = counts.mean();
    Ok(gain_from_counts(&counts, base, err.gt_region_id, &err.pixels, pred))
}

/// Error components of every ground-truth region, most important first.
/// Equal importance keeps raster order of each component's first pixel.
pub fn extract_error_regions(pred: &Segmentation, gt: &RegionLabelMap) -> Result<Vec<ErrorRegion>> {
    check_same_dims(pred, gt)?;
    let (w, h) = (gt.width(), gt.height());
    let counts = IouCounts::new(pred, gt)?;
    let base = counts.mean();
    let wrong = |x: usize, y: usize| pred.get(x, y) != gt.get(x, y);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[y * w + x] || !wrong(x, y) {
                continue;
            }
            let region = gt.get(x, y);
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(x, y)]);
            seen[y * w + x] = true;
            while let Some((px, py)) = queue.pop_front() {
                pixels.push((px, py));
                for (nx, ny) in neighbors4(px, py, w, h) {
                    if !seen[ny * w + nx] && wrong(nx, ny) && gt.get(nx, ny) == region {
                        seen[ny * w + nx] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            pixels.sort_by_key(|&(px, py)| (py, px));
            let importance = gain_from_counts(&counts, base, region, &pixels, pred);
            out.push(ErrorRegion {
                gt_region_id: region,
                pixels,
                importance,
            });
        }
    }
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    Ok(out)
}

/// Candidate start pixels: error pixels 4-adjacent to a correctly predicted
/// pixel of the same region; failing that, pixels on the error region's
/// boundary; failing that, any error pixel.
fn start_candidates(err: &ErrorRegion, gt: &RegionLabelMap) -> Vec<(usize, usize)> {
    let (w, h) = (gt.width(), gt.height());
    let mut inside = AnnotationMap::new(w, h);
    inside.set_pixels(&err.pixels);
    let region = err.gt_region_id;
    let touching_correct: Vec<_> = err
        .pixels
        .iter()
        .copied()
        .filter(|&(x, y)| neighbors4(x, y, w, h).any(|(nx, ny)| !inside.get(nx, ny) && gt.get(nx, ny) == region))
        .collect();
    if !touching_correct.is_empty() {
        return touching_correct;
    }
    let boundary: Vec<_> = err.pixels.iter().copied().filter(|&(x, y)| on_boundary(&inside, x, y)).collect();
    if !boundary.is_empty() {
        return boundary;
    }
    err.pixels.clone()
}

/// Best of [`SCRIBBLE_ATTEMPTS`] three-point curves through the error region
/// whose rasterization stays inside the ground-truth region. `None` only when
/// no pixel of the region takes a full stroke stamp.
pub fn simulate_scribble<R: Rng + ?Sized>(err: &ErrorRegion, gt: &RegionLabelMap, rng: &mut R) -> Option<Scribble> {
    if err.pixels.is_empty() {
        return None;
    }
    let (w, h) = (gt.width(), gt.height());
    let starts = start_candidates(err, gt);
    let as_point = |(x, y): (usize, usize)| PointF::new(x as f64, y as f64);
    let mut best: Option<Scribble> = None;
    for _ in 0..SCRIBBLE_ATTEMPTS {
        let p0 = as_point(starts[rng.random_range(0..starts.len())]);
        let p1 = as_point(err.pixels[rng.random_range(0..err.pixels.len())]);
        let p2 = as_point(err.pixels[rng.random_range(0..err.pixels.len())]);
        let Ok(s) = Scribble::new(err.gt_region_id, [p0, p1, p2], w, h) else {
            continue;
        };
        let valid = s.pixels().iter().all(|&(x, y)| gt.get(x, y) == err.gt_region_id);
        if valid && best.as_ref().is_none_or(|b| s.len() > b.len()) {
            best = Some(s);
        }
    }
    // Last resort: a single stamp on the first error pixel where it fits.
    best.or_else(|| {
        err.pixels.iter().find_map(|&p| {
            let p = as_point(p);
            let s = Scribble::new(err.gt_region_id, [p, p, p], w, h).ok()?;
            s.pixels().iter().all(|&(x, y)| gt.get(x, y) == err.gt_region_id).then_some(s)
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationMode {
    /// One scribble per region with any error.
    Fixed,
    /// A shared budget spent on the most important errors anywhere.
    Free,
}

impl std::fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AllocationMode::Fixed => "fixed",
            AllocationMode::Free => "free",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AllocationStrategy {
    pub mode: AllocationMode,
    /// Scribbles per round in free mode; `None` means one per region.
    pub budget: Option<usize>,
}

impl AllocationStrategy {
    pub fn fixed() -> Self {
        AllocationStrategy {
            mode: AllocationMode::Fixed,
            budget: None,
        }
    }

    pub fn free() -> Self {
        AllocationStrategy {
            mode: AllocationMode::Free,
            budget: None,
        }
    }

    pub fn free_with_budget(budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidInput("budget must be >= 1".into()));
        }
        Ok(AllocationStrategy {
            mode: AllocationMode::Free,
            budget: Some(budget),
        })
    }
}

/// Scribbles for one round against the current prediction.
///
/// Fixed mode walks each region's error regions by importance and keeps the
/// first that yields a valid scribble. Free mode walks the global importance
/// order until the budget is spent. Importance is computed once per call.
pub fn allocate_scribbles<R: Rng + ?Sized>(
    pred: &Segmentation,
    gt: &RegionLabelMap,
    strategy: &AllocationStrategy,
    rng: &mut R,
) -> Result<Vec<Scribble>> {
    let n = gt.num_regions();
    if n == 0 {
        return Err(Error::InvalidInput("no regions".into()));
    }
    let errors = extract_error_regions(pred, gt)?;
    let mut out = Vec::new();
    match strategy.mode {
        AllocationMode::Fixed => {
            for region in 1..=n {
                for err in errors.iter().filter(|e| e.gt_region_id == region) {
                    if let Some(s) = simulate_scribble(err, gt, rng) {
                        out.push(s);
                        break;
                    }
                }
            }
        }
        AllocationMode::Free => {
            let budget = strategy.budget.unwrap_or(n);
            for err in &errors {
                if out.len() == budget {
                    break;
                }
                if let Some(s) = simulate_scribble(err, gt, rng) {
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}

/// Result of one annotator/machine exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub scribbles: Vec<Scribble>,
    pub segmentation: Segmentation,
    pub iou: RegionIou,
}

/// Settings shared by every prediction in an interactive session.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub box_margin: f64,
    pub sharing: Sharing,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            box_margin: 0.0,
            sharing: Sharing::Shared,
        }
    }
}

/// Prediction from the current annotation state.
pub fn predict_from_annotations<F: Real>(
    image: &Tensor<F>,
    annotations: &AnnotationState,
    params: &ModelParams<F>,
    opts: &InferenceOptions,
) -> Result<Segmentation> {
    let boxes: Vec<BBox> = annotations.boxes(opts.box_margin)?;
    let pairs = annotations.region_pairs(opts.sharing.is_shared())?;
    Ok(predict_segmentation(image, &boxes, &pairs, params)?.0)
}

/// Allocates scribbles against `current`, appends them to `annotations` and
/// re-runs the model. With no new scribbles the prediction is kept as is.
pub fn interactive_round<F: Real, R: Rng + ?Sized>(
    image: &Tensor<F>,
    annotations: &mut AnnotationState,
    current: &Segmentation,
    params: &ModelParams<F>,
    gt: &RegionLabelMap,
    strategy: &AllocationStrategy,
    opts: &InferenceOptions,
    rng: &mut R,
) -> Result<RoundOutcome> {
    let scribbles = allocate_scribbles(current, gt, strategy, rng)?;
    let segmentation = if scribbles.is_empty() {
        current.clone()
    } else {
        annotations.scribbles.extend(scribbles.iter().cloned());
        predict_from_annotations(image, annotations, params, opts)?
    };
    let iou = IouCounts::new(&segmentation, gt)?.iou();
    Ok(RoundOutcome {
        scribbles,
        segmentation,
        iou,
    })
}
