//! Interactive full-image segmentation in which every annotated region
//! competes for pixels on one shared canvas.
//!
//! Layers, bottom-up:
//! - [`tensor`], [`ops`], [`autodiff`]: dense numerics and reverse-mode
//!   differentiation.
//! - [`geometry`]: boxes, extreme points, scribbles and the shared
//!   positive/negative annotation maps.
//! - [`model`]: backbone, per-region head, canvas projection, losses,
//!   training, inference, IoU and checkpoints.
//! - [`annotator`]: simulated annotator (extreme points, error regions,
//!   corrective scribbles, allocation strategies, interactive rounds).
//! - [`harness`]: synthetic scenes, two-stage training, experiments.

pub mod annotator;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
