//! Synthetic Voronoi scenes and their on-disk layout.

use std::f64::consts::TAU;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RegionLabelMap;
use crate::tensor::Tensor;

/// Smallest allowed region, in pixels.
pub const MIN_REGION_PIXELS: usize = 25;

/// Scene index offsets keeping the three splits on disjoint seed streams.
pub const TRAIN_OFFSET: u64 = 0;
pub const INTERACTIVE_OFFSET: u64 = 1_000_000;
pub const EVAL_OFFSET: u64 = 2_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[size, size, 3]`, values are multiples of 1/255.
    pub image: Tensor<f32>,
    pub labels: RegionLabelMap,
    pub seed: u64,
    pub index: u64,
}

/// Independent 64-bit seed for stream `tag` of `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Smooth random field: bilinear interpolation of a coarse uniform grid.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64 * cells as f64;
            let fy = (y as f64 + 0.5) / size as f64 * cells as f64;
            let (x0, y0) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let at = |i: usize, j: usize| grid[j * g + i];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

struct Warp {
    terms: Vec<(f64, f64, f64, f64)>,
}

impl Warp {
    fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let amp = size as f64 / 16.0;
        let terms = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.5..2.0) * TAU / size as f64,
                    rng.random_range(0.5..2.0) * TAU / size as f64,
                    rng.random_range(0.0..TAU),
                    amp * rng.random_range(0.3..1.0),
                )
            })
            .collect();
        Warp { terms }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.terms;
        let dx = t[0].3 * (t[0].1 * y + t[0].2).sin() + t[1].3 * (t[1].0 * x + t[1].1 * y + t[1].2).sin();
        let dy = t[2].3 * (t[2].0 * x + t[2].2).sin() + t[3].3 * (t[3].0 * x - t[3].1 * y + t[3].2).sin();
        (x + dx, y + dy)
    }
}

/// Probability that a region reuses the color of an earlier region, leaving
/// only the annotations to separate the two.
pub const COLOR_REUSE_PROB: f64 = 0.6;

/// Region colors: fresh ones are kept apart from every earlier fresh color,
/// reused ones copy an earlier region exactly.
fn region_colors(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    const MIN_DIST: f64 = 0.3;
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut fresh: Vec<[f64; 3]> = Vec::with_capacity(n);
    while colors.len() < n {
        if !colors.is_empty() && rng.random_bool(COLOR_REUSE_PROB) {
            let c = colors[rng.random_range(0..colors.len())];
            colors.push(c);
            continue;
        }
        let mut tries = 0;
        let c = loop {
            let c = [(); 3].map(|_| rng.random_range(0.1..0.9));
            tries += 1;
            let far = fresh
                .iter()
                .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_DIST);
            if far || tries > 1000 {
                break c;
            }
        };
        fresh.push(c);
        colors.push(c);
    }
    colors
}

/// Nearest-site labels of every pixel center, optionally warped first. Ties
/// go to the lower site index.
fn nearest_site_labels(size: usize, sites: &[(f64, f64)], warp: Option<&Warp>) -> Vec<u16> {
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (wx, wy) = warp.map_or((cx, cy), |w| w.apply(cx, cy));
            let mut best = (f64::INFINITY, 0);
            for (i, &(sx, sy)) in sites.iter().enumerate() {
                let d = (wx - sx).powi(2) + (wy - sy).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            labels.push(best.1 as u16 + 1);
        }
    }
    labels
}

/// Plain Voronoi labels (1-based site index) of a `size x size` grid.
pub fn voronoi_labels(size: usize, sites: &[(f64, f64)]) -> Vec<u16> {
    nearest_site_labels(size, sites, None)
}

/// Warped Voronoi partition into `n` cells, or `None` if some cell is too
/// small.
fn partition(rng: &mut ChaCha8Rng, size: usize, n: usize) -> Option<Vec<u16>> {
    let s = size as f64;
    let sites: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s))).collect();
    let warp = Warp::sample(rng, size);
    let labels = nearest_site_labels(size, &sites, Some(&warp));
    let mut counts = vec![0usize; n];
    for &l in &labels {
        counts[l as usize - 1] += 1;
    }
    counts.iter().all(|&c| c >= MIN_REGION_PIXELS).then_some(labels)
}

/// Scene `index` of the stream seeded by `seed`, with region count drawn
/// uniformly from `regions`.
pub fn generate_scene(size: usize, seed: u64, index: u64, regions: std::ops::RangeInclusive<usize>) -> Result<SyntheticScene> {
    if ![32, 64, 128].contains(&size) {
        return Err(Error::InvalidInput(format!("scene size {size} not in {{32, 64, 128}}")));
    }
    if *regions.start() < 2 || *regions.end() > 8 || regions.is_empty() {
        return Err(Error::InvalidInput(format!("region range {regions:?} outside 2..=8")));
    }
    let mut rng = scene_rng(seed, index);
    let n = rng.random_range(regions);
    let labels = loop {
        if let Some(l) = partition(&mut rng, size, n) {
            break l;
        }
    };
    let colors = region_colors(&mut rng, n);
    let noise: Vec<Vec<f64>> = (0..3).map(|_| value_noise(&mut rng, size, 6)).collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for (p, &l) in labels.iter().enumerate() {
        let base = colors[l as usize - 1];
        for c in 0..3 {
            let grain = rng.random_range(-1.0..1.0);
            let v = (base[c] + 0.08 * noise[c][p] + 0.03 * grain).clamp(0.0, 1.0);
            data.push(((v * 255.0).round() / 255.0) as f32);
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![size, size, 3], data)?,
        labels: RegionLabelMap::new(size, size, labels)?,
        seed,
        index,
    })
}

/// `count` scenes with indices `offset..offset + count`.
pub fn generate_synthetic_dataset(
    count: usize,
    size: usize,
    seed: u64,
    offset: u64,
    regions: std::ops::RangeInclusive<usize>,
) -> Result<Vec<SyntheticScene>> {
    (0..count as u64)
        .map(|i| generate_scene(size, seed, offset + i, regions.clone()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    index: u64,
    num_regions: usize,
}

/// Writes `image.png` (8-bit RGB), `labels.png` (16-bit gray) and
/// `meta.json` into `dir`.
pub fn save_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w, _) = scene.image.dims3();
    let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| (scene.image.at3(y as usize, x as usize, c) * 255.0).round() as u8))
    });
    img.save(dir.join("image.png"))?;
    let labels = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([scene.labels.get(x as usize, y as usize) as u16])
    });
    labels.save(dir.join("labels.png"))?;
    let meta = SceneMeta {
        seed: scene.seed,
        index: scene.index,
        num_regions: scene.labels.num_regions(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    for f in ["image.png", "labels.png", "meta.json"] {
        if !dir.join(f).exists() {
            return Err(Error::MissingFile(dir.join(f)));
        }
    }
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let img = image::open(dir.join("image.png"))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = Tensor::from_fn3(h, w, 3, |y, x, c| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0);
    let lab = image::open(dir.join("labels.png"))?.to_luma16();
    if (lab.width() as usize, lab.height() as usize) != (w, h) {
        return Err(Error::Shape("labels.png and image.png differ in size".into()));
    }
    let labels = RegionLabelMap::new(w, h, lab.pixels().map(|p| p[0]).collect())?;
    if labels.num_regions() != meta.num_regions {
        return Err(Error::InvalidInput(format!(
            "meta.json says {} regions, labels.png has {}",
            meta.num_regions,
            labels.num_regions()
        )));
    }
    Ok(SyntheticScene {
        image,
        labels,
        seed: meta.seed,
        index: meta.index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(64, 3, 17, 2..=8).unwrap();
        let b = generate_scene(64, 3, 17, 2..=8).unwrap();
        let c = generate_scene(64, 3, 18, 2..=8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn scenes_satisfy_invariants() {
        for i in 0..20 {
            let s = generate_scene(32, 1, i, 2..=8).unwrap();
            let n = s.labels.num_regions();
            assert!((2..=8).contains(&n));
            assert!(s.labels.region_sizes().iter().all(|&c| c >= MIN_REGION_PIXELS));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.image.data().iter().all(|&v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-7));
        }
    }

    #[test]
    fn colors_are_reused_or_far_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut reused, mut total) = (0, 0);
        for _ in 0..500 {
            let colors = region_colors(&mut rng, 6);
            for i in 1..colors.len() {
                total += 1;
                let d = |o: &[f64; 3]| o.iter().zip(&colors[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if colors[..i].contains(&colors[i]) {
                    reused += 1;
                } else {
                    assert!(colors[..i].iter().all(|o| d(o) >= 0.3));
                }
            }
        }
        let rate = reused as f64 / total as f64;
        assert!((rate - COLOR_REUSE_PROB).abs() < 0.03, "{rate}");
    }

    #[test]
    fn region_counts_cover_range() {
        let mut seen = [false; 9];
        for i in 0..200 {
            seen[generate_scene(32, 9, i, 2..=8).unwrap().labels.num_regions()] = true;
        }
        assert!(seen[2..=8].iter().all(|&s| s));
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(32, 4, 2, 2..=8).unwrap();
        save_scene(&s, dir.path()).unwrap();
        assert_eq!(load_scene(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn two_corner_sites_split_on_bisector() {
        let l = voronoi_labels(8, &[(0.0, 0.0), (8.0, 8.0)]);
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x + y <= 7 { 1 } else { 2 };
                assert_eq!(l[y * 8 + x], expected, "({x}, {y})");
            }
        }
    }

    #[test]
    fn bad_size_is_rejected() {
        assert!(generate_scene(48, 0, 0, 2..=8).is_err());
    }
}
