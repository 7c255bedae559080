#![allow(dead_code)]

use cseg_core::annotator::simulate_annotations;
use cseg_core::geometry::{AnnotationState, PointF, Scribble};
use cseg_core::harness::voronoi_labels;
use cseg_core::model::{RegionLabelMap, Segmentation};
use cseg_core::Tensor;
use rand::seq::index::sample;
use rand::Rng;

/// One random canvas: image, ground truth and its simulated annotations.
pub struct Case {
    pub image: Tensor<f32>,
    pub gt: RegionLabelMap,
    pub annotations: AnnotationState,
}

/// Voronoi ground truth of a `size x size` canvas with `n` regions. Sites sit
/// on distinct pixel centers, so every region owns at least its site pixel.
pub fn random_labels<R: Rng>(rng: &mut R, size: usize, n: usize) -> RegionLabelMap {
    let sites: Vec<(f64, f64)> = sample(rng, size * size, n)
        .into_iter()
        .map(|i| ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
        .collect();
    RegionLabelMap::new(size, size, voronoi_labels(size, &sites)).unwrap()
}

pub fn random_image<R: Rng>(rng: &mut R, size: usize) -> Tensor<f32> {
    let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    Tensor::new(vec![size, size, 3], data).unwrap()
}

/// Random canvas of side `4k <= max_size` with 2 to `max_regions` regions and
/// up to `max_scribbles` scribbles at random positions.
pub fn random_case<R: Rng>(rng: &mut R, max_size: usize, max_regions: usize, max_scribbles: usize) -> Case {
    let size = 4 * rng.random_range(4..=max_size / 4);
    let n = rng.random_range(2..=max_regions);
    let gt = random_labels(rng, size, n);
    let mut annotations = simulate_annotations(&gt, 0, rng).unwrap();
    for _ in 0..rng.random_range(0..=max_scribbles) {
        let mut pt = || PointF::new(rng.random_range(0..size) as f64, rng.random_range(0..size) as f64);
        let cps = [pt(), pt(), pt()];
        let region = rng.random_range(1..=n);
        annotations.scribbles.push(Scribble::new(region, cps, size, size).unwrap());
    }
    Case {
        image: random_image(rng, size),
        gt,
        annotations,
    }
}

/// A prediction that agrees with `gt` except inside a few random rectangles
/// relabeled to random regions.
pub fn perturbed_prediction<R: Rng>(rng: &mut R, gt: &RegionLabelMap, blobs: usize) -> Segmentation {
    let (w, h, n) = (gt.width(), gt.height(), gt.num_regions());
    let mut pred = Segmentation::new(w, h, n, gt.labels().to_vec()).unwrap();
    for _ in 0..blobs {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (bw, bh) = (rng.random_range(1..=w / 3), rng.random_range(1..=h / 3));
        let label = rng.random_range(1..=n);
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                pred.set(x, y, label);
            }
        }
    }
    pred
}

/// 4-connected components of `{p : gt(p) = i, pred(p) != i}` per region,
/// by union-find over the whole grid. Each component is sorted by `(y, x)`.
pub fn brute_force_error_components(pred: &Segmentation, gt: &RegionLabelMap) -> Vec<(usize, Vec<(usize, usize)>)> {
    let (w, h) = (gt.width(), gt.height());
    let wrong = |i: usize| pred.labels()[i] != gt.labels()[i];
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !wrong(i) {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if wrong(j) && gt.labels()[j] == gt.labels()[i] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for i in (0..w * h).filter(|&i| wrong(i)) {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push((i % w, i / w));
    }
    groups
        .into_values()
        .map(|mut px| {
            px.sort_by_key(|&(x, y)| (y, x));
            (gt.get(px[0].0, px[0].1), px)
        })
        .collect()
}

/// Mean IoU over ground-truth regions straight from pixel sets.
pub fn brute_force_mean_iou(pred: &Segmentation, gt: &RegionLabelMap) -> f64 {
    let n = gt.num_regions();
    let mut total = 0.0;
    for r in 1..=n {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (a, b) = (p as usize == r, g as usize == r);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        total += inter as f64 / union as f64;
    }
    total / n as f64
}
