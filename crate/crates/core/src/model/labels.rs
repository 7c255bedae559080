//! Ground-truth partitions, predicted segmentations and region IoU.

use crate::error::{Error, Result};
use crate::geometry::AnnotationMap;

/// Ground-truth partition `Y`: every pixel carries a region index in
/// `1..=num_regions`, and every region owns at least one pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabelMap {
    width: usize,
    height: usize,
    num_regions: usize,
    labels: Vec<u16>,
}

impl RegionLabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        if labels.contains(&0) {
            return Err(Error::InvalidInput("label 0 is reserved".into()));
        }
        let num_regions = *labels.iter().max().unwrap() as usize;
        let mut seen = vec![false; num_regions];
        for &l in &labels {
            seen[l as usize - 1] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::MissingRegion(missing + 1));
        }
        Ok(RegionLabelMap {
            width,
            height,
            num_regions,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    /// Binary indicator of a 1-based region.
    pub fn mask(&self, region: usize) -> AnnotationMap {
        let mut m = AnnotationMap::new(self.width, self.height);
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize == region {
                m.set(i % self.width, i / self.width);
            }
        }
        m
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_regions];
        for &l in &self.labels {
            sizes[l as usize - 1] += 1;
        }
        sizes
    }
}

/// A predicted partition: one region index per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    width: usize,
    height: usize,
    num_regions: usize,
    labels: Vec<u16>,
}

impl Segmentation {
    pub fn new(width: usize, height: usize, num_regions: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} segmentation",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > num_regions) {
            return Err(Error::InvalidInput(format!("label {bad} outside 1..={num_regions}")));
        }
        Ok(Segmentation {
            width,
            height,
            num_regions,
            labels,
        })
    }

    /// Every pixel assigned to region 1.
    pub fn uniform(width: usize, height: usize, num_regions: usize) -> Self {
        Segmentation {
            width,
            height,
            num_regions,
            labels: vec![1; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    pub fn set(&mut self, x: usize, y: usize, region: usize) {
        self.labels[y * self.width + x] = region as u16;
    }
}

impl From<&RegionLabelMap> for Segmentation {
    fn from(y: &RegionLabelMap) -> Self {
        Segmentation {
            width: y.width,
            height: y.height,
            num_regions: y.num_regions,
            labels: y.labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionIou {
    pub mean: f64,
    pub per_region: Vec<f64>,
}

/// Per-region intersection and size counts between a prediction and `Y`.
/// IoU is always derived from these integers, so incremental updates and
/// full recomputation agree bit for bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<usize>,
    pub predicted: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

impl IouCounts {
    pub fn new(pred: &Segmentation, gt: &RegionLabelMap) -> Result<Self> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let n = gt.num_regions;
        let mut c = IouCounts {
            intersection: vec![0; n],
            predicted: vec![0; n],
            ground_truth: vec![0; n],
        };
        for (&p, &y) in pred.labels.iter().zip(&gt.labels) {
            let (p, y) = (p as usize, y as usize);
            c.ground_truth[y - 1] += 1;
            if p >= 1 && p <= n {
                c.predicted[p - 1] += 1;
                if p == y {
                    c.intersection[y - 1] += 1;
                }
            }
        }
        if let Some(i) = c.ground_truth.iter().position(|&g| g == 0) {
            return Err(Error::MissingRegion(i + 1));
        }
        Ok(c)
    }

    pub fn region_iou(&self, i: usize) -> f64 {
        let inter = self.intersection[i];
        let union = self.predicted[i] + self.ground_truth[i] - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn iou(&self) -> RegionIou {
        let per_region: Vec<f64> = (0..self.ground_truth.len()).map(|i| self.region_iou(i)).collect();
        let mean = per_region.iter().sum::<f64>() / per_region.len() as f64;
        RegionIou { mean, per_region }
    }

    pub fn mean(&self) -> f64 {
        self.iou().mean
    }
}

/// Per-region IoU and its mean over all ground-truth regions.
pub fn mean_region_iou(pred: &Segmentation, gt: &RegionLabelMap) -> Result<RegionIou> {
    Ok(IouCounts::new(pred, gt)?.iou())
}
