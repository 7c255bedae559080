//! Forward path: backbone, per-region head, canvas projection and the
//! per-pixel softmax over regions.

use std::cell::Cell;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{crop_annotation_map, BBox, RegionAnnotationPair};
use crate::ops::{Extent, Padding};
use crate::tensor::{Real, Tensor};

use super::labels::Segmentation;
use super::params::ModelParams;

/// Logit written to canvas pixels outside a region's box.
pub const CANVAS_FILL: f64 = -10000.0;

thread_local! {
    static BACKBONE_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of backbone passes run on the current thread.
pub fn backbone_pass_count() -> u64 {
    BACKBONE_PASSES.with(|c| c.get())
}

/// Full-resolution per-region logits `[H, W, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitCanvas<F: Real = f32>(pub Tensor<F>);

/// Per-pixel region probabilities `[H, W, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbCanvas<F: Real = f32>(pub Tensor<F>);

impl<F: Real> LogitCanvas<F> {
    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }
}

impl<F: Real> ProbCanvas<F> {
    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn num_regions(&self) -> usize {
        self.0.shape()[2]
    }

    /// Probability of 1-based `region` at pixel `(x, y)`.
    pub fn prob(&self, x: usize, y: usize, region: usize) -> F {
        self.0.at3(y, x, region - 1)
    }

    /// Argmax over regions per pixel; ties go to the lowest region index.
    pub fn argmax(&self) -> Segmentation {
        let (h, w, n) = self.0.dims3();
        let labels = self
            .0
            .data()
            .chunks(n)
            .map(|px| {
                let mut best = 0;
                for k in 1..n {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                (best + 1) as u16
            })
            .collect();
        Segmentation::new(w, h, n, labels).expect("argmax labels lie in 1..=n")
    }
}

/// Parameter tensors bound as graph leaves.
pub(crate) struct ParamVars {
    pub backbone: Vec<(Var, Var, usize)>,
    pub head: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn bind<F: Real>(g: &mut Graph<F>, params: &ModelParams<F>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<F>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let backbone = params
            .backbone
            .iter()
            .map(|l| (leaf(&l.kernel), leaf(&l.bias), l.stride))
            .collect();
        let head = params.head.iter().map(|l| (leaf(&l.kernel), leaf(&l.bias))).collect();
        ParamVars { backbone, head }
    }

    /// Reassembles variables given in [`ModelParams::tensors`] order.
    pub fn from_flat<F: Real>(vars: &[Var], params: &ModelParams<F>) -> Self {
        let nb = params.backbone.len();
        let backbone = params
            .backbone
            .iter()
            .enumerate()
            .map(|(i, l)| (vars[2 * i], vars[2 * i + 1], l.stride))
            .collect();
        let head = (0..params.head.len())
            .map(|i| (vars[2 * (nb + i)], vars[2 * (nb + i) + 1]))
            .collect();
        ParamVars { backbone, head }
    }

    /// Variables in [`ModelParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .flat_map(|&(k, b, _)| [k, b])
            .chain(self.head.iter().flat_map(|&(k, b)| [k, b]))
            .collect()
    }
}

pub(crate) fn backbone_graph<F: Real>(g: &mut Graph<F>, pv: &ParamVars, reduction: usize, image: Var) -> Result<Var> {
    let (h, w, c) = g.value(image).dims3();
    if c != super::params::IMAGE_CHANNELS {
        return Err(Error::Shape(format!("image has {c} channels, expected 3")));
    }
    if h % reduction != 0 || w % reduction != 0 {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} is not divisible by the reduction factor {reduction}"
        )));
    }
    BACKBONE_PASSES.with(|n| n.set(n.get() + 1));
    let mut x = image;
    for &(k, b, stride) in &pv.backbone {
        let conv = g.conv2d(x, k, stride, Padding::Same)?;
        let biased = g.add_bias(conv, b)?;
        x = g.relu(biased)?;
    }
    Ok(x)
}

pub(crate) fn head_graph<F: Real>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    params: &ModelParams<F>,
    features: Var,
    bbox: &BBox,
    annotation_crop: Tensor<F>,
) -> Result<Var> {
    let cfg = &params.config;
    let [rh, rw] = cfg.roi_size;
    let [mh, mw] = cfg.mask_size;
    let extent = bbox.extent().scaled(1.0 / cfg.reduction() as f64);
    let roi = g.bilinear_crop(features, extent, rh, rw)?;
    let ann = g.constant(annotation_crop);
    let mut x = g.concat_channels(&[roi, ann])?;
    let (last, hidden) = pv.head.split_last().expect("head has a final layer");
    for &(k, b) in hidden {
        let conv = g.conv2d(x, k, 1, Padding::Same)?;
        let biased = g.add_bias(conv, b)?;
        x = g.relu(biased)?;
    }
    x = g.bilinear_crop(x, Extent::full(rh, rw), mh, mw)?;
    let conv = g.conv2d(x, last.0, 1, Padding::Same)?;
    g.add_bias(conv, last.1)
}

pub(crate) fn canvas_graph<F: Real>(
    g: &mut Graph<F>,
    logit_maps: &[Var],
    boxes: &[BBox],
    width: usize,
    height: usize,
) -> Result<Var> {
    if logit_maps.len() != boxes.len() {
        return Err(Error::InvalidInput(format!(
            "{} logit maps for {} boxes",
            logit_maps.len(),
            boxes.len()
        )));
    }
    if logit_maps.is_empty() {
        return Err(Error::InvalidInput("no regions".into()));
    }
    let pasted: Vec<Var> = logit_maps
        .iter()
        .zip(boxes)
        .map(|(&l, b)| g.bilinear_paste(l, b.extent(), height, width, F::of(CANVAS_FILL)))
        .collect::<Result<_>>()?;
    g.concat_channels(&pasted)
}

/// Graph nodes of one full forward pass.
pub(crate) struct ForwardVars {
    pub logits: Vec<Var>,
}

/// Backbone once, then the head for each region.
pub(crate) fn region_logits_graph<F: Real>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    params: &ModelParams<F>,
    image: &Tensor<F>,
    boxes: &[BBox],
    pairs: &[RegionAnnotationPair],
) -> Result<ForwardVars> {
    if boxes.len() != pairs.len() {
        return Err(Error::InvalidInput(format!(
            "{} boxes for {} annotation pairs",
            boxes.len(),
            pairs.len()
        )));
    }
    let (h, w, _) = image.dims3();
    if let Some(b) = boxes.iter().find(|b| !b.within(w, h)) {
        return Err(Error::InvalidInput(format!("box {b:?} outside {w}x{h} image")));
    }
    let [rh, rw] = params.config.roi_size;
    let img = g.constant(image.clone());
    let features = backbone_graph(g, pv, params.config.reduction(), img)?;
    let logits = boxes
        .iter()
        .zip(pairs)
        .map(|(b, pair)| {
            let crop = crop_annotation_map::<F>(pair, b, rh, rw)?;
            head_graph(g, pv, params, features, b, crop)
        })
        .collect::<Result<_>>()?;
    Ok(ForwardVars { logits })
}

/// Backbone feature map `Z` of shape `[H/r, W/r, C]`.
pub fn backbone_forward<F: Real>(image: &Tensor<F>, params: &ModelParams<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let img = g.constant(image.clone());
    let z = backbone_graph(&mut g, &pv, params.config.reduction(), img)?;
    Ok(g.value(z).clone())
}

/// Logit map `l_i` of shape `[h', w', 1]` for one region.
pub fn region_head_forward<F: Real>(
    features: &Tensor<F>,
    bbox: &BBox,
    pair: &RegionAnnotationPair,
    params: &ModelParams<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let z = g.constant(features.clone());
    let [rh, rw] = params.config.roi_size;
    let crop = crop_annotation_map::<F>(pair, bbox, rh, rw)?;
    let l = head_graph(&mut g, &pv, params, z, bbox, crop)?;
    Ok(g.value(l).clone())
}

/// Pastes each logit map into its box on a `height x width` canvas.
pub fn project_to_canvas<F: Real>(
    logit_maps: &[Tensor<F>],
    boxes: &[BBox],
    width: usize,
    height: usize,
) -> Result<LogitCanvas<F>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = logit_maps.iter().map(|l| g.constant(l.clone())).collect();
    let c = canvas_graph(&mut g, &vars, boxes, width, height)?;
    Ok(LogitCanvas(g.value(c).clone()))
}

pub fn canvas_probabilities<F: Real>(logits: &LogitCanvas<F>) -> ProbCanvas<F> {
    ProbCanvas(crate::ops::channel_softmax(&logits.0))
}

/// Full forward pass and argmax over the canvas.
pub fn predict_segmentation<F: Real>(
    image: &Tensor<F>,
    boxes: &[BBox],
    pairs: &[RegionAnnotationPair],
    params: &ModelParams<F>,
) -> Result<(Segmentation, ProbCanvas<F>)> {
    if boxes.is_empty() {
        return Err(Error::InvalidInput("prediction needs at least one box".into()));
    }
    let (h, w, _) = image.dims3();
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let fwd = region_logits_graph(&mut g, &pv, params, image, boxes, pairs)?;
    let canvas = canvas_graph(&mut g, &fwd.logits, boxes, w, h)?;
    let probs = canvas_probabilities(&LogitCanvas(g.value(canvas).clone()));
    Ok((probs.argmax(), probs))
}
