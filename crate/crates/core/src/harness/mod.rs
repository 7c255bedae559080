//! Synthetic scenes, two-stage training, and the curve and ablation
//! experiments.

mod config;
mod data;
mod experiment;
mod pipeline;

pub use config::{CurveConfig, DataConfig, ExperimentConfig, OptimizerKind, OutputConfig, TrainConfig};
pub use data::{
    derive_seed, generate_scene, generate_synthetic_dataset, load_scene, save_scene, voronoi_labels, SyntheticScene,
    COLOR_REUSE_PROB, EVAL_OFFSET, INTERACTIVE_OFFSET, MIN_REGION_PIXELS, TRAIN_OFFSET,
};
pub use experiment::{
    ablation_csv, build_stage2, curve_csv, evaluate_curve, evaluate_extreme_points, generate_split,
    load_or_train_stage1, load_or_train_stage2, render_overlay, require_checkpoint, run_ablation, run_experiment,
    save_overlay, stage2_examples, stage_file, AblationCell, AblationRun, CurvePoint, ExperimentOutputs, Split,
    ALL_CELLS,
};
pub use pipeline::{
    extreme_point_examples, generate_interactive_training_set, inference_options, step_options, train_model,
    train_stage1, train_stage2, TrainOutcome,
};
