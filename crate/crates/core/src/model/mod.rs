//! Region-competition segmentation model: parameters, forward pass, losses
//! and training.

pub mod checkpoint;
mod labels;
mod loss;
mod network;
mod params;
mod train;

pub use labels::{mean_region_iou, IouCounts, RegionIou, RegionLabelMap, Segmentation};
pub use loss::{maskwise_bce_loss, maskwise_targets, pixel_weights, pixelwise_loss, WeightMap, PROB_FLOOR};
pub use network::{
    backbone_forward, backbone_pass_count, canvas_probabilities, predict_segmentation, project_to_canvas,
    region_head_forward, LogitCanvas, ProbCanvas, CANVAS_FILL,
};
pub use params::{ConvLayer, LayerSpec, ModelConfig, ModelParams, ANNOTATION_CHANNELS, IMAGE_CHANNELS};
pub use train::{
    check_model_gradients, loss_and_gradients, train_step, Adam, LossMode, Optimizer, Sgd, Sharing, StepOptions, TrainExample,
};
