//! Two-stage training: extreme points only, then extreme points plus
//! scribbles simulated against the stage-1 model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotator::{interactive_round, predict_from_annotations, simulate_annotations, AllocationStrategy, InferenceOptions};
use crate::error::Result;
use crate::model::{checkpoint, train_step, ModelParams, StepOptions, TrainExample};

use super::config::{ExperimentConfig, TrainConfig};
use super::data::{derive_seed, SyntheticScene};

/// Seed stream tags.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_TRAIN_POINTS: u64 = 2;
pub(crate) const TAG_ORDER: u64 = 3;
pub(crate) const TAG_INTERACTIVE: u64 = 4;
pub(crate) const TAG_EVAL_POINTS: u64 = 5;
pub(crate) const TAG_EVAL_SCRIBBLES: u64 = 6;

pub(crate) fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
}

pub fn step_options(train: &TrainConfig) -> StepOptions {
    StepOptions {
        loss: train.loss,
        sharing: train.sharing,
        box_margin: train.box_margin,
    }
}

pub fn inference_options(train: &TrainConfig) -> InferenceOptions {
    InferenceOptions {
        box_margin: train.box_margin,
        sharing: train.sharing,
    }
}

/// Training tuples carrying simulated extreme points only.
pub fn extreme_point_examples(scenes: &[SyntheticScene], jitter: usize, seed: u64, tag: u64) -> Result<Vec<TrainExample>> {
    scenes
        .iter()
        .map(|s| {
            let mut rng = stream_rng(seed, tag, s.index);
            Ok(TrainExample {
                image: s.image.clone(),
                labels: s.labels.clone(),
                annotations: simulate_annotations(&s.labels, jitter, &mut rng)?,
            })
        })
        .collect()
}

/// SGD over `examples` for `steps` steps, visiting them in a reshuffled order
/// each epoch. Checkpoints go to `checkpoint_dir` as `{name}_step{k}.ckpt`.
pub fn train_model(
    examples: &[TrainExample],
    mut params: ModelParams,
    train: &TrainConfig,
    steps: usize,
    order_seed: u64,
    checkpoint_dir: Option<(&Path, &str)>,
) -> Result<TrainOutcome> {
    let opts = step_options(train);
    let mut opt = train.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        while batch.len() < train.batch_size {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(examples[order.pop().expect("refilled")].clone());
        }
        opt.set_learning_rate(train.learning_rate_at(step, steps));
        let loss = train_step(&batch, &mut params, opt.as_mut(), &opts, step)?;
        losses.push(loss);
        if step % 100 == 0 {
            tracing::debug!(step, loss, "train");
        }
        if let Some((dir, name)) = checkpoint_dir {
            if train.checkpoint_every > 0 && (step + 1) % train.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                checkpoint::save(&params, &dir.join(format!("{name}_step{}.ckpt", step + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Stage 1: the configured loss and sharing mode on extreme points alone.
pub fn train_stage1(scenes: &[SyntheticScene], cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let examples = extreme_point_examples(scenes, cfg.data.extreme_jitter, cfg.seed, TAG_TRAIN_POINTS)?;
    let init = ModelParams::init(&cfg.model, derive_seed(cfg.seed, TAG_INIT))?;
    let name = format!("stage1_{}_{}", cfg.train.loss, cfg.train.sharing);
    train_model(
        &examples,
        init,
        &cfg.train,
        cfg.train.stage1_steps,
        derive_seed(cfg.seed, TAG_ORDER),
        checkpoint_dir.map(|d| (d, name.as_str())),
    )
}

/// Runs the stage-1 model interactively on held-out scenes and keeps each
/// scene's annotation state after a random number of rounds (1 to
/// `stage2_rounds`). Strategies alternate between fixed and free by scene.
pub fn generate_interactive_training_set(
    scenes: &[SyntheticScene],
    stage1: &ModelParams,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrainExample>> {
    let opts = inference_options(&cfg.train);
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(cfg.seed, TAG_INTERACTIVE, s.index);
            let mut annotations = simulate_annotations(&s.labels, cfg.data.extreme_jitter, &mut rng)?;
            let strategy = if i % 2 == 0 {
                AllocationStrategy::fixed()
            } else {
                AllocationStrategy::free()
            };
            let rounds = if cfg.train.stage2_rounds == 0 {
                0
            } else {
                rng.random_range(1..=cfg.train.stage2_rounds)
            };
            let mut pred = predict_from_annotations(&s.image, &annotations, stage1, &opts)?;
            for _ in 0..rounds {
                let out = interactive_round(&s.image, &mut annotations, &pred, stage1, &s.labels, &strategy, &opts, &mut rng)?;
                pred = out.segmentation;
            }
            Ok(TrainExample {
                image: s.image.clone(),
                labels: s.labels.clone(),
                annotations,
            })
        })
        .collect()
}

/// Stage 2: continues from the stage-1 parameters on the combined tuples.
pub fn train_stage2(
    examples: &[TrainExample],
    stage1: &ModelParams,
    cfg: &ExperimentConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let name = format!("stage2_{}_{}", cfg.train.loss, cfg.train.sharing);
    train_model(
        examples,
        stage1.clone(),
        &cfg.train,
        cfg.train.stage2_steps,
        derive_seed(cfg.seed, TAG_ORDER) ^ 0x5eed,
        checkpoint_dir.map(|d| (d, name.as_str())),
    )
}
