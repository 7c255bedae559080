//! Pixel-wise region-competition loss, its inverse-box-area weighting, and
//! the mask-wise BCE baseline.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::ops;
use crate::tensor::{Real, Tensor};

use super::labels::RegionLabelMap;
use super::network::ProbCanvas;

/// Lower bound applied to probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel loss weights, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl WeightMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }
}

/// Weight of each pixel is the inverse area of the smallest box containing
/// it; pixels outside every box get `1 / (W * H)`.
pub fn pixel_weights(boxes: &[BBox], width: usize, height: usize) -> WeightMap {
    let mut min_area = vec![f64::INFINITY; width * height];
    for b in boxes {
        let e = b.extent();
        let area = b.area();
        for y in e.rows(height) {
            for x in e.cols(width) {
                let slot = &mut min_area[y * width + x];
                if area < *slot {
                    *slot = area;
                }
            }
        }
    }
    let fallback = (width * height) as f64;
    WeightMap {
        width,
        height,
        weights: min_area
            .into_iter()
            .map(|a| 1.0 / if a.is_finite() { a } else { fallback })
            .collect(),
    }
}

fn check_dims<F: Real>(probs: &ProbCanvas<F>, gt: &RegionLabelMap, weights: &WeightMap) -> Result<()> {
    let (h, w, n) = probs.tensor().dims3();
    if (w, h) != (gt.width(), gt.height()) || (w, h) != (weights.width, weights.height) {
        return Err(Error::Shape(format!(
            "canvas {w}x{h}, labels {}x{}, weights {}x{}",
            gt.width(),
            gt.height(),
            weights.width,
            weights.height
        )));
    }
    if gt.num_regions() > n {
        return Err(Error::Shape(format!("{} regions for {n} canvas channels", gt.num_regions())));
    }
    Ok(())
}

/// Weighted categorical cross-entropy `sum_xy w(x,y) * -ln P[Y(x,y)]` (not
/// normalized by the region count).
pub fn pixelwise_loss<F: Real>(probs: &ProbCanvas<F>, gt: &RegionLabelMap, weights: &WeightMap) -> Result<f64> {
    check_dims(probs, gt, weights)?;
    let n = probs.num_regions();
    let p = probs.tensor().data();
    Ok(gt
        .labels()
        .iter()
        .zip(&weights.weights)
        .enumerate()
        .map(|(i, (&y, &w))| w * -p[i * n + y as usize - 1].as_f64().max(PROB_FLOOR).ln())
        .sum())
}

pub(crate) fn pixelwise_loss_graph<F: Real>(
    g: &mut Graph<F>,
    probs: Var,
    gt: &RegionLabelMap,
    weights: &WeightMap,
) -> Result<Var> {
    let labels = Arc::new(gt.labels().iter().map(|&l| l as u32 - 1).collect());
    let w = Arc::new(weights.weights.iter().map(|&v| F::of(v)).collect());
    g.weighted_nll(probs, labels, w, F::of(PROB_FLOOR))
}

/// Binary target for each region's logit map: RoI crop of the region
/// indicator under its box, thresholded at 0.5.
pub fn maskwise_targets(boxes: &[BBox], gt: &RegionLabelMap, mask_size: [usize; 2]) -> Result<Vec<Vec<f64>>> {
    let (w, h) = (gt.width(), gt.height());
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let region = i + 1;
            let indicator = Tensor::<f64>::from_fn3(h, w, 1, |y, x, _| if gt.get(x, y) == region { 1.0 } else { 0.0 });
            let crop = ops::bilinear_crop(&indicator, &b.extent(), mask_size[0], mask_size[1])?;
            Ok(crop.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect())
        })
        .collect()
}

/// Sum over regions of the mean sigmoid BCE of each logit map against its
/// target. Regions never interact.
pub fn maskwise_bce_loss<F: Real>(logit_maps: &[Tensor<F>], boxes: &[BBox], gt: &RegionLabelMap) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = logit_maps.iter().map(|l| g.constant(l.clone())).collect();
    let loss = maskwise_loss_graph(&mut g, &vars, boxes, gt)?;
    Ok(g.value(loss).data()[0].as_f64())
}

pub(crate) fn maskwise_loss_graph<F: Real>(
    g: &mut Graph<F>,
    logits: &[Var],
    boxes: &[BBox],
    gt: &RegionLabelMap,
) -> Result<Var> {
    if logits.len() != boxes.len() {
        return Err(Error::InvalidInput(format!(
            "{} logit maps for {} boxes",
            logits.len(),
            boxes.len()
        )));
    }
    let Some(&first) = logits.first() else {
        return Err(Error::InvalidInput("no regions".into()));
    };
    let (mh, mw, _) = g.value(first).dims3();
    let targets = maskwise_targets(boxes, gt, [mh, mw])?;
    let terms: Vec<Var> = logits
        .iter()
        .zip(targets)
        .map(|(&l, t)| g.sigmoid_bce_mean(l, Arc::new(t.into_iter().map(F::of).collect())))
        .collect::<Result<_>>()?;
    g.add(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_full_box_gives_uniform_weights() {
        let w = pixel_weights(&[BBox::full(8, 6)], 8, 6);
        assert!(w.weights.iter().all(|&v| v == 1.0 / 48.0));
    }

    #[test]
    fn smallest_containing_box_wins() {
        let small = BBox::new(2.0, 2.0, 11.0, 11.0).unwrap();
        let large = BBox::new(0.0, 0.0, 19.0, 19.0).unwrap();
        assert_eq!((small.area(), large.area()), (100.0, 400.0));
        let w = pixel_weights(&[large, small], 20, 20);
        assert_eq!(w.get(5, 5), 1.0 / 100.0);
        assert_eq!(w.get(15, 15), 1.0 / 400.0);
    }

    #[test]
    fn uncovered_pixels_get_fallback() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let w = pixel_weights(&[b], 10, 10);
        assert_eq!(w.get(9, 9), 1.0 / 100.0);
        assert_eq!(w.get(1, 1), 1.0 / 9.0);
    }

    #[test]
    fn single_region_loss_is_zero() {
        let y = RegionLabelMap::new(3, 3, vec![1; 9]).unwrap();
        let p = ProbCanvas(Tensor::<f64>::full(&[3, 3, 1], 1.0));
        let w = pixel_weights(&[BBox::full(3, 3)], 3, 3);
        assert_eq!(pixelwise_loss(&p, &y, &w).unwrap(), 0.0);
    }

    #[test]
    fn uniform_probabilities_closed_form() {
        let (w, h) = (5, 4);
        let labels: Vec<u16> = (0..20).map(|i| (i % 4 + 1) as u16).collect();
        let y = RegionLabelMap::new(w, h, labels).unwrap();
        let p = ProbCanvas(Tensor::<f64>::full(&[h, w, 4], 0.25));
        let ones = WeightMap {
            width: w,
            height: h,
            weights: vec![1.0; 20],
        };
        let loss = pixelwise_loss(&p, &y, &ones).unwrap();
        assert!((loss - 20.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_bce_closed_form() {
        let y = RegionLabelMap::new(4, 4, (0..16).map(|i| if i < 8 { 1 } else { 2 }).collect()).unwrap();
        let boxes = [BBox::new(0.0, 0.0, 3.0, 1.0).unwrap(), BBox::new(0.0, 2.0, 3.0, 3.0).unwrap()];
        let maps = vec![Tensor::<f64>::zeros(&[5, 5, 1]); 2];
        let loss = maskwise_bce_loss(&maps, &boxes, &y).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<u16> = (0..64).map(|_| rng.random_range(1..=2)).collect();
        let y = RegionLabelMap::new(8, 8, labels).unwrap();
        let boxes = [BBox::full(8, 8), BBox::full(8, 8)];
        let targets = maskwise_targets(&boxes, &y, [8, 8]).unwrap();
        let maps: Vec<Tensor<f64>> = targets
            .iter()
            .map(|t| Tensor::new(vec![8, 8, 1], t.iter().map(|&v| if v > 0.5 { 50.0 } else { -50.0 }).collect()).unwrap())
            .collect();
        assert!(maskwise_bce_loss(&maps, &boxes, &y).unwrap() < 1e-15);
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let y = RegionLabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let maps = vec![Tensor::<f64>::zeros(&[3, 3, 1])];
        assert!(maskwise_bce_loss(&maps, &[BBox::full(2, 2), BBox::full(2, 2)], &y).is_err());
    }
}
