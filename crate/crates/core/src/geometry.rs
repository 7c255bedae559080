//! Annotation primitives and their rasterization.
//!
//! Coordinates: integer pixel `(x, y)` positions, and [`BBox`] corners given
//! in pixel-center units, inclusive on both ends. A box `[x0, x1]` therefore
//! spans pixels `x0..=x1` when its corners are integral, and its area is
//! `(x1 - x0 + 1) * (y1 - y0 + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Extent};
use crate::tensor::{Real, Tensor};

/// Extreme-point discs are 6 pixels in diameter.
pub const DISC_RADIUS: f64 = 3.0;
/// Scribbles are stamped with a 3x3 square.
pub const STROKE_HALF_WIDTH: i64 = 1;
/// Bezier/polyline samples per pixel of (upper-bounded) path length.
const SAMPLES_PER_PIXEL: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

impl Point {
    pub fn new(x: usize, y: usize) -> Self {
        Point { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointF {
    pub x: f64,
    pub y: f64,
}

impl PointF {
    pub fn new(x: f64, y: f64) -> Self {
        PointF { x, y }
    }

    fn dist(self, o: PointF) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

impl From<Point> for PointF {
    fn from(p: Point) -> Self {
        PointF::new(p.x as f64, p.y as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateBox(format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn full(width: usize, height: usize) -> Self {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: width as f64 - 1.0,
            y1: height as f64 - 1.0,
        }
    }

    /// The box as a sampling region in pixel-edge coordinates.
    pub fn extent(&self) -> Extent {
        Extent {
            x0: self.x0,
            y0: self.y0,
            x1: self.x1 + 1.0,
            y1: self.y1 + 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0 + 1.0) * (self.y1 - self.y0 + 1.0)
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as f64, y as f64);
        x >= self.x0 - 0.5 && x < self.x1 + 0.5 && y >= self.y0 - 0.5 && y < self.y1 + 0.5
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f64 - 1.0 && self.y1 <= height as f64 - 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtremePoints {
    pub left: Point,
    pub right: Point,
    pub top: Point,
    pub bottom: Point,
}

impl ExtremePoints {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let pts = [self.left, self.right, self.top, self.bottom];
        if let Some(p) = pts.iter().find(|p| p.x >= width || p.y >= height) {
            return Err(Error::InvalidInput(format!(
                "extreme point ({}, {}) outside {width}x{height} image",
                p.x, p.y
            )));
        }
        if self.left.x > self.right.x || self.top.y > self.bottom.y {
            return Err(Error::InvalidInput(format!("extreme points out of order: {self:?}")));
        }
        Ok(())
    }

    pub fn points(&self) -> [Point; 4] {
        [self.left, self.right, self.top, self.bottom]
    }
}

/// Box spanned by the extreme points, grown by `margin_fraction` of its span
/// on each side, clamped to the image, and widened to at least 3 pixels per
/// axis.
pub fn box_from_extreme_points(
    ep: &ExtremePoints,
    margin_fraction: f64,
    width: usize,
    height: usize,
) -> Result<BBox> {
    ep.validate(width, height)?;
    if width < 3 || height < 3 {
        return Err(Error::InvalidInput(format!("image {width}x{height} too small for a box")));
    }
    let axis = |lo: usize, hi: usize, n: usize| -> (f64, f64) {
        let (lo, hi) = (lo as f64, hi as f64);
        let m = margin_fraction * (hi - lo);
        let max = n as f64 - 1.0;
        let (mut a, mut b) = ((lo - m).max(0.0), (hi + m).min(max));
        if b - a < 2.0 {
            let c = 0.5 * (a + b);
            a = (c - 1.0).clamp(0.0, max - 2.0);
            b = a + 2.0;
        }
        (a, b)
    };
    let (x0, x1) = axis(ep.left.x, ep.right.x, width);
    let (y0, y1) = axis(ep.top.y, ep.bottom.y, height);
    BBox::new(x0, y0, x1, y1)
}

/// Binary `width x height` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationMap {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl AnnotationMap {
    pub fn new(width: usize, height: usize) -> Self {
        AnnotationMap {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.mask[y * self.width + x] = true;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &AnnotationMap) {
        debug_assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, &b) in self.mask.iter_mut().zip(&other.mask) {
            *a |= b;
        }
    }

    pub fn set_pixels(&mut self, pixels: &[(usize, usize)]) {
        for &(x, y) in pixels {
            self.set(x, y);
        }
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }
}

pub fn rasterize_extreme_points(ep: &ExtremePoints, width: usize, height: usize) -> AnnotationMap {
    let mut map = AnnotationMap::new(width, height);
    let r = DISC_RADIUS as i64;
    let r2 = DISC_RADIUS * DISC_RADIUS;
    for p in ep.points() {
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy) as f64) > r2 {
                    continue;
                }
                let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    map.set(x as usize, y as usize);
                }
            }
        }
    }
    map
}

/// Quadratic bezier through three points: the middle point is hit at `t = 0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolatingBezier {
    pub start: PointF,
    pub control: PointF,
    pub end: PointF,
}

impl InterpolatingBezier {
    pub fn through(p0: PointF, p1: PointF, p2: PointF) -> Self {
        InterpolatingBezier {
            start: p0,
            control: PointF::new(2.0 * p1.x - 0.5 * (p0.x + p2.x), 2.0 * p1.y - 0.5 * (p0.y + p2.y)),
            end: p2,
        }
    }

    pub fn at(&self, t: f64) -> PointF {
        let u = 1.0 - t;
        let (a, b, c) = (u * u, 2.0 * t * u, t * t);
        PointF::new(
            a * self.start.x + b * self.control.x + c * self.end.x,
            a * self.start.y + b * self.control.y + c * self.end.y,
        )
    }

    /// Upper bound on arc length: length of the control polygon.
    pub fn length_bound(&self) -> f64 {
        self.start.dist(self.control) + self.control.dist(self.end)
    }
}

fn stamp(map: &mut AnnotationMap, p: PointF) {
    let cx = (p.x.round() as i64).clamp(0, map.width as i64 - 1);
    let cy = (p.y.round() as i64).clamp(0, map.height as i64 - 1);
    for dy in -STROKE_HALF_WIDTH..=STROKE_HALF_WIDTH {
        for dx in -STROKE_HALF_WIDTH..=STROKE_HALF_WIDTH {
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && (x as usize) < map.width && (y as usize) < map.height {
                map.set(x as usize, y as usize);
            }
        }
    }
}

/// Stamps a 3x3 square at `samples_per_pixel * length` evenly spaced
/// parameter values of `curve` over `[0, 1]`.
pub fn rasterize_curve(
    curve: &InterpolatingBezier,
    width: usize,
    height: usize,
    samples_per_pixel: f64,
) -> AnnotationMap {
    let mut map = AnnotationMap::new(width, height);
    let n = (samples_per_pixel * curve.length_bound()).ceil().max(1.0) as usize;
    for i in 0..=n {
        stamp(&mut map, curve.at(i as f64 / n as f64));
    }
    map
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scribble {
    pub region_id: usize,
    pub control_points: [PointF; 3],
    pixels: Vec<(usize, usize)>,
}

impl Scribble {
    /// Builds the scribble and its rasterization. `region_id` is 1-based.
    pub fn new(region_id: usize, control_points: [PointF; 3], width: usize, height: usize) -> Result<Self> {
        if let Some(p) = control_points
            .iter()
            .find(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x <= width as f64 - 1.0 && p.y <= height as f64 - 1.0))
        {
            return Err(Error::InvalidInput(format!("control point {p:?} outside image")));
        }
        let curve = InterpolatingBezier::through(control_points[0], control_points[1], control_points[2]);
        let pixels = rasterize_curve(&curve, width, height, SAMPLES_PER_PIXEL).pixels().collect();
        Ok(Scribble {
            region_id,
            control_points,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    /// Number of distinct rasterized pixels.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

pub fn rasterize_scribble(s: &Scribble, width: usize, height: usize) -> AnnotationMap {
    let mut map = AnnotationMap::new(width, height);
    map.set_pixels(&s.pixels);
    map
}

/// Rasterizes a free-hand polyline with the scribble stroke rule. Points are
/// clamped into the image.
pub fn rasterize_polyline(points: &[PointF], width: usize, height: usize) -> AnnotationMap {
    let mut map = AnnotationMap::new(width, height);
    if let [only] = points {
        stamp(&mut map, *only);
    }
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let n = (SAMPLES_PER_PIXEL * a.dist(b)).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            stamp(&mut map, PointF::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    map
}

/// Positive map `S_i` and shared negative map (union of every other `S_j`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionAnnotationPair {
    pub positive: AnnotationMap,
    pub negative: AnnotationMap,
}

impl RegionAnnotationPair {
    /// `[h, w, 2]` tensor: channel 0 positive, channel 1 negative.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let (w, h) = (self.positive.width, self.positive.height);
        Tensor::from_fn3(h, w, 2, |y, x, c| {
            let on = if c == 0 { self.positive.get(x, y) } else { self.negative.get(x, y) };
            if on {
                F::one()
            } else {
                F::zero()
            }
        })
    }

    pub fn without_negative(mut self) -> Self {
        self.negative = AnnotationMap::new(self.negative.width, self.negative.height);
        self
    }
}

/// `F_i = (S_i, OR_{j != i} S_j)` for a 1-based `region_id`.
pub fn build_region_annotation_pair(region_id: usize, maps: &[AnnotationMap]) -> Result<RegionAnnotationPair> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("empty annotation list".into()))?;
    if region_id == 0 || region_id > maps.len() {
        return Err(Error::InvalidInput(format!(
            "region {region_id} outside 1..={}",
            maps.len()
        )));
    }
    let mut negative = AnnotationMap::new(first.width, first.height);
    for (j, m) in maps.iter().enumerate() {
        if j + 1 != region_id {
            negative.union_with(m);
        }
    }
    Ok(RegionAnnotationPair {
        positive: maps[region_id - 1].clone(),
        negative,
    })
}

/// RoI-aligned crop of both channels of `pair` under `bbox`.
pub fn crop_annotation_map<F: Real>(
    pair: &RegionAnnotationPair,
    bbox: &BBox,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<F>> {
    ops::bilinear_crop(&pair.to_tensor::<F>(), &bbox.extent(), out_h, out_w)
}

/// A free-hand corrective stroke, already rasterized.
#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    pub region_id: usize,
    pub points: Vec<PointF>,
    pixels: Vec<(usize, usize)>,
}

impl Stroke {
    pub fn new(region_id: usize, points: Vec<PointF>, width: usize, height: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("empty stroke".into()));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidInput("non-finite stroke point".into()));
        }
        let pixels = rasterize_polyline(&points, width, height).pixels().collect();
        Ok(Stroke {
            region_id,
            points,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }
}

/// Everything an annotator has provided for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationState {
    pub width: usize,
    pub height: usize,
    pub extreme_points: Vec<ExtremePoints>,
    pub scribbles: Vec<Scribble>,
    pub strokes: Vec<Stroke>,
}

impl AnnotationState {
    pub fn from_extreme_points(width: usize, height: usize, extreme_points: Vec<ExtremePoints>) -> Self {
        AnnotationState {
            width,
            height,
            extreme_points,
            scribbles: Vec::new(),
            strokes: Vec::new(),
        }
    }

    pub fn num_regions(&self) -> usize {
        self.extreme_points.len()
    }

    pub fn scribble_count(&self) -> usize {
        self.scribbles.len() + self.strokes.len()
    }

    pub fn boxes(&self, margin_fraction: f64) -> Result<Vec<BBox>> {
        self.extreme_points
            .iter()
            .map(|ep| box_from_extreme_points(ep, margin_fraction, self.width, self.height))
            .collect()
    }

    /// Positive maps `S_1..S_N`: extreme-point discs plus every scribble and
    /// stroke attributed to the region.
    pub fn positive_maps(&self) -> Vec<AnnotationMap> {
        let mut maps: Vec<AnnotationMap> = self
            .extreme_points
            .iter()
            .map(|ep| rasterize_extreme_points(ep, self.width, self.height))
            .collect();
        for s in &self.scribbles {
            maps[s.region_id - 1].set_pixels(s.pixels());
        }
        for s in &self.strokes {
            maps[s.region_id - 1].set_pixels(s.pixels());
        }
        maps
    }

    /// Per-region annotation pairs. With `shared == false` the negative
    /// channel is left empty.
    pub fn region_pairs(&self, shared: bool) -> Result<Vec<RegionAnnotationPair>> {
        let maps = self.positive_maps();
        (1..=maps.len())
            .map(|i| {
                let pair = build_region_annotation_pair(i, &maps)?;
                Ok(if shared { pair } else { pair.without_negative() })
            })
            .collect()
    }
}
