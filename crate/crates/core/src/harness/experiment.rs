//! IoU-versus-scribbles curves, the loss/sharing ablation grid, and their
//! file outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::annotator::{interactive_round, predict_from_annotations, simulate_annotations, AllocationStrategy};
use crate::error::{Error, Result};
use crate::model::{checkpoint, mean_region_iou, LossMode, ModelParams, Segmentation, Sharing, TrainExample};
use crate::tensor::Tensor;

use super::config::ExperimentConfig;
use super::data::{generate_synthetic_dataset, SyntheticScene, EVAL_OFFSET, INTERACTIVE_OFFSET, TRAIN_OFFSET};
use super::pipeline::{
    extreme_point_examples, generate_interactive_training_set, inference_options, stream_rng, train_stage1,
    train_stage2, TAG_EVAL_POINTS, TAG_EVAL_SCRIBBLES, TAG_TRAIN_POINTS,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    /// Mean over scenes of cumulative scribbles divided by region count.
    pub scribbles_per_region: f64,
    pub mean_iou: f64,
}

/// Which split a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Interactive,
    Eval,
}

pub fn generate_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<SyntheticScene>> {
    let d = &cfg.data;
    let (count, offset) = match split {
        Split::Train => (d.train_count, TRAIN_OFFSET),
        Split::Interactive => (d.interactive_count, INTERACTIVE_OFFSET),
        Split::Eval => (d.eval_count, EVAL_OFFSET),
    };
    generate_synthetic_dataset(count, d.size, cfg.seed, offset, d.min_regions..=d.max_regions)
}

/// Non-interactive mean IoU over `scenes` from extreme points alone.
pub fn evaluate_extreme_points(params: &ModelParams, scenes: &[SyntheticScene], cfg: &ExperimentConfig) -> Result<f64> {
    let opts = inference_options(&cfg.train);
    let mut total = 0.0;
    for s in scenes {
        let mut rng = stream_rng(cfg.seed, TAG_EVAL_POINTS, s.index);
        let ann = simulate_annotations(&s.labels, cfg.data.extreme_jitter, &mut rng)?;
        let pred = predict_from_annotations(&s.image, &ann, params, &opts)?;
        total += mean_region_iou(&pred, &s.labels)?.mean;
    }
    Ok(total / scenes.len().max(1) as f64)
}

/// Mean IoU per round over `scenes`: round 0 is the extreme-point prediction,
/// each later round adds the scribbles of `strategy`. Scenes draw from the
/// same random streams under every strategy. Overlays of each prediction go
/// to `overlay_dir` when given.
pub fn evaluate_curve(
    params: &ModelParams,
    scenes: &[SyntheticScene],
    strategy: &AllocationStrategy,
    rounds: usize,
    cfg: &ExperimentConfig,
    overlay_dir: Option<&Path>,
) -> Result<Vec<CurvePoint>> {
    let opts = inference_options(&cfg.train);
    let mut iou = vec![0.0; rounds + 1];
    let mut spr = vec![0.0; rounds + 1];
    for s in scenes {
        let mut point_rng = stream_rng(cfg.seed, TAG_EVAL_POINTS, s.index);
        let mut ann = simulate_annotations(&s.labels, cfg.data.extreme_jitter, &mut point_rng)?;
        let mut rng = stream_rng(cfg.seed, TAG_EVAL_SCRIBBLES, s.index);
        let mut pred = predict_from_annotations(&s.image, &ann, params, &opts)?;
        iou[0] += mean_region_iou(&pred, &s.labels)?.mean;
        let n = s.labels.num_regions() as f64;
        if let Some(dir) = overlay_dir {
            save_overlay(&s.image, &pred, &dir.join(format!("scene{}_round0.png", s.index)))?;
        }
        for r in 1..=rounds {
            let out = interactive_round(&s.image, &mut ann, &pred, params, &s.labels, strategy, &opts, &mut rng)?;
            pred = out.segmentation;
            iou[r] += out.iou.mean;
            spr[r] += ann.scribble_count() as f64 / n;
            if let Some(dir) = overlay_dir {
                save_overlay(&s.image, &pred, &dir.join(format!("scene{}_round{r}.png", s.index)))?;
            }
        }
    }
    let m = scenes.len().max(1) as f64;
    Ok((0..=rounds)
        .map(|r| CurvePoint {
            round: r,
            scribbles_per_region: spr[r] / m,
            mean_iou: iou[r] / m,
        })
        .collect())
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("round,scribbles_per_region,mean_iou\n");
    for p in points {
        writeln!(out, "{},{:.6},{:.6}", p.round, p.scribbles_per_region, p.mean_iou).expect("string write");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub loss: LossMode,
    pub sharing: Sharing,
    pub mean_iou: f64,
}

pub const ALL_CELLS: [(LossMode, Sharing); 4] = [
    (LossMode::Maskwise, Sharing::Unshared),
    (LossMode::Maskwise, Sharing::Shared),
    (LossMode::Pixelwise, Sharing::Unshared),
    (LossMode::Pixelwise, Sharing::Shared),
];

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("loss,sharing,mean_iou\n");
    for c in cells {
        writeln!(out, "{},{},{:.6}", c.loss, c.sharing, c.mean_iou).expect("string write");
    }
    out
}

/// Result of the loss/sharing grid, with the stage-1 models it trained.
pub struct AblationRun {
    pub cells: Vec<AblationCell>,
    pub models: Vec<((LossMode, Sharing), ModelParams)>,
}

/// Trains one stage-1 model per cell from the same initialization and data
/// order and scores each on the eval split from extreme points alone.
pub fn run_ablation(cfg: &ExperimentConfig, cells: &[(LossMode, Sharing)], checkpoint_dir: Option<&Path>) -> Result<AblationRun> {
    let train = generate_split(cfg, Split::Train)?;
    let eval = generate_split(cfg, Split::Eval)?;
    let mut out = AblationRun {
        cells: Vec::new(),
        models: Vec::new(),
    };
    for &(loss, sharing) in cells {
        let mut c = cfg.clone();
        c.train.loss = loss;
        c.train.sharing = sharing;
        let started = std::time::Instant::now();
        let trained = train_stage1(&train, &c, checkpoint_dir)?;
        let mean_iou = evaluate_extreme_points(&trained.params, &eval, &c)?;
        tracing::info!(%loss, %sharing, mean_iou, secs = started.elapsed().as_secs_f64(), "ablation cell");
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&trained.params, &dir.join(stage_file(1, loss, sharing)))?;
        }
        out.cells.push(AblationCell { loss, sharing, mean_iou });
        out.models.push(((loss, sharing), trained.params));
    }
    Ok(out)
}

pub fn stage_file(stage: u8, loss: LossMode, sharing: Sharing) -> String {
    format!("stage{stage}_{loss}_{sharing}.ckpt")
}

/// Stage-2 tuples: the stage-1 training tuples plus interactive tuples from
/// the held-out split.
pub fn stage2_examples(cfg: &ExperimentConfig, stage1: &ModelParams) -> Result<Vec<TrainExample>> {
    let train = generate_split(cfg, Split::Train)?;
    let interactive = generate_split(cfg, Split::Interactive)?;
    let mut examples = extreme_point_examples(&train, cfg.data.extreme_jitter, cfg.seed, TAG_TRAIN_POINTS)?;
    examples.extend(generate_interactive_training_set(&interactive, stage1, cfg)?);
    Ok(examples)
}

/// Stage-2 model from a trained stage-1 model.
pub fn build_stage2(cfg: &ExperimentConfig, stage1: &ModelParams, checkpoint_dir: Option<&Path>) -> Result<ModelParams> {
    let examples = stage2_examples(cfg, stage1)?;
    Ok(train_stage2(&examples, stage1, cfg, checkpoint_dir)?.params)
}

/// Paths written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutputs {
    pub curve: Vec<CurvePoint>,
    pub csv_path: PathBuf,
}

/// Full pipeline for one strategy: stage 1, stage 2, then the curve on the
/// eval split. Existing checkpoints in the output directory are reused.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutputs> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir)?;
    let params = load_or_train_stage2(cfg)?;
    let eval = generate_split(cfg, Split::Eval)?;
    let overlays = cfg.output.overlays.then(|| dir.join(format!("overlays_{}", cfg.curve.strategy)));
    if let Some(o) = &overlays {
        std::fs::create_dir_all(o)?;
    }
    let curve = evaluate_curve(&params, &eval, &cfg.curve.strategy(), cfg.curve.rounds, cfg, overlays.as_deref())?;
    let csv_path = dir.join(format!("curve_{}.csv", cfg.curve.strategy));
    std::fs::write(&csv_path, curve_csv(&curve))?;
    Ok(ExperimentOutputs { curve, csv_path })
}

pub fn load_or_train_stage1(cfg: &ExperimentConfig) -> Result<ModelParams> {
    let dir = &cfg.output.dir;
    let path = dir.join(stage_file(1, cfg.train.loss, cfg.train.sharing));
    if path.exists() {
        return checkpoint::load(&path);
    }
    std::fs::create_dir_all(dir)?;
    let train = generate_split(cfg, Split::Train)?;
    let params = train_stage1(&train, cfg, Some(dir))?.params;
    checkpoint::save(&params, &path)?;
    Ok(params)
}

pub fn load_or_train_stage2(cfg: &ExperimentConfig) -> Result<ModelParams> {
    let dir = &cfg.output.dir;
    let path = dir.join(stage_file(2, cfg.train.loss, cfg.train.sharing));
    if path.exists() {
        return checkpoint::load(&path);
    }
    let stage1 = load_or_train_stage1(cfg)?;
    let params = build_stage2(cfg, &stage1, Some(dir))?;
    checkpoint::save(&params, &path)?;
    Ok(params)
}

/// Loads a stage checkpoint that must already exist.
pub fn require_checkpoint(path: &Path) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    checkpoint::load(path)
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Half-transparent region colors over the image, with region borders drawn
/// opaque.
pub fn render_overlay(image: &Tensor<f32>, seg: &Segmentation) -> RgbImage {
    let (h, w, _) = image.dims3();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let l = seg.get(x, y);
        let color = PALETTE[(l - 1) % PALETTE.len()];
        let border = (x + 1 < w && seg.get(x + 1, y) != l) || (y + 1 < h && seg.get(x, y + 1) != l);
        Rgb([0, 1, 2].map(|c| {
            if border {
                color[c]
            } else {
                let v = image.at3(y, x, c) * 255.0;
                (0.5 * v + 0.5 * color[c] as f32).round() as u8
            }
        }))
    })
}

pub fn save_overlay(image: &Tensor<f32>, seg: &Segmentation, path: &Path) -> Result<()> {
    render_overlay(image, seg).save(path)?;
    Ok(())
}
