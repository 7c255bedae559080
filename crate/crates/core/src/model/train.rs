use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_check, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::AnnotationState;
use crate::tensor::{Real, Tensor};

use super::labels::RegionLabelMap;
use super::loss::{maskwise_loss_graph, pixel_weights, pixelwise_loss_graph};
use super::network::{canvas_graph, region_logits_graph, ParamVars};
use super::params::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Pixelwise,
    Maskwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    Shared,
    Unshared,
}

impl Sharing {
    pub fn is_shared(self) -> bool {
        self == Sharing::Shared
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Pixelwise => "pixelwise",
            LossMode::Maskwise => "maskwise",
        })
    }
}

impl std::fmt::Display for Sharing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sharing::Shared => "shared",
            Sharing::Unshared => "unshared",
        })
    }
}

/// One training image with its ground truth and simulated annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub image: Tensor<f32>,
    pub labels: RegionLabelMap,
    pub annotations: AnnotationState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub loss: LossMode,
    pub sharing: Sharing,
    pub box_margin: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            loss: LossMode::Pixelwise,
            sharing: Sharing::Shared,
            box_margin: 0.0,
        }
    }
}

/// Training objective of one example as a graph node.
///
/// Pixel-wise mode: weighted cross-entropy over the canvas divided by the
/// region count. Mask-wise mode: summed per-region BCE.
pub(crate) fn objective_graph<F: Real>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    params: &ModelParams<F>,
    example: &TrainExample,
    opts: &StepOptions,
) -> Result<Var> {
    let image = example.image.cast::<F>();
    let (h, w, _) = image.dims3();
    let boxes = example.annotations.boxes(opts.box_margin)?;
    let pairs = example.annotations.region_pairs(opts.sharing.is_shared())?;
    let fwd = region_logits_graph(g, pv, params, &image, &boxes, &pairs)?;
    match opts.loss {
        LossMode::Pixelwise => {
            let canvas = canvas_graph(g, &fwd.logits, &boxes, w, h)?;
            let probs = g.channel_softmax(canvas)?;
            let weights = pixel_weights(&boxes, w, h);
            let total = pixelwise_loss_graph(g, probs, &example.labels, &weights)?;
            g.scale(total, F::of(1.0 / boxes.len() as f64))
        }
        LossMode::Maskwise => maskwise_loss_graph(g, &fwd.logits, &boxes, &example.labels),
    }
}

/// Objective value and its gradient for every parameter tensor.
pub fn loss_and_gradients<F: Real>(
    params: &ModelParams<F>,
    example: &TrainExample,
    opts: &StepOptions,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, true);
    let loss = objective_graph(&mut g, &pv, params, example, opts)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let tensors = params.tensors();
    let out = pv
        .vars()
        .into_iter()
        .zip(tensors)
        .map(|(v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}

/// Max relative error between reverse-mode and central-difference
/// gradients of the training objective over all parameters.
pub fn check_model_gradients(
    params: &ModelParams<f64>,
    example: &TrainExample,
    opts: &StepOptions,
    epsilon: f64,
) -> Result<f64> {
    let tensors: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    gradient_check(
        |g, vars| {
            let pv = ParamVars::from_flat(vars, params);
            objective_graph(g, &pv, params, example, opts)
        },
        &tensors,
        epsilon,
    )
}

/// First-order update rule applied to all parameter tensors at once.
pub trait Optimizer<F: Real> {
    fn set_learning_rate(&mut self, lr: f64);
    fn apply(&mut self, params: &mut ModelParams<F>, grads: &[Tensor<F>]);
}

/// Factor that rescales `grads` to global norm at most `clip`.
fn clip_scale<F: Real>(grads: &[Tensor<F>], clip: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

/// Stochastic gradient descent with heavy-ball momentum and optional
/// global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Sgd<F: Real = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    velocity: Vec<Tensor<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(learning_rate: f64, momentum: f64, grad_clip: Option<f64>) -> Self {
        Sgd {
            learning_rate,
            momentum,
            grad_clip,
            velocity: Vec::new(),
        }
    }
}

impl<F: Real> Optimizer<F> for Sgd<F> {
    fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    fn apply(&mut self, params: &mut ModelParams<F>, grads: &[Tensor<F>]) {
        let scale = clip_scale(grads, self.grad_clip);
        let mut slots = params.tensors_mut();
        if self.velocity.is_empty() {
            self.velocity = slots.iter().map(|t| Tensor::zeros(t.shape())).collect();
        }
        let (mu, lr, scale) = (F::of(self.momentum), F::of(self.learning_rate), F::of(scale));
        for ((p, v), g) in slots.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<F: Real = f32> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    step: i32,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(learning_rate: f64, grad_clip: Option<f64>) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<F: Real> Optimizer<F> for Adam<F> {
    fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    fn apply(&mut self, params: &mut ModelParams<F>, grads: &[Tensor<F>]) {
        let scale = F::of(clip_scale(grads, self.grad_clip));
        let mut slots = params.tensors_mut();
        if self.m.is_empty() {
            self.m = slots.iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = 1.0 / (1.0 - self.beta1.powi(self.step));
        let c2 = 1.0 / (1.0 - self.beta2.powi(self.step));
        let (lr, c1, c2, eps) = (F::of(self.learning_rate), F::of(c1), F::of(c2), F::of(self.eps));
        for (((p, m), v), g) in slots.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((pv, mv), vv), &gv) in it {
                let gv = scale * gv;
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                *pv -= lr * (*mv * c1) / ((*vv * c2).sqrt() + eps);
            }
        }
    }
}

/// One optimizer step on the mean objective over `batch`. Parameters are
/// left untouched when the loss is not finite.
pub fn train_step<F: Real, O: Optimizer<F> + ?Sized>(
    batch: &[TrainExample],
    params: &mut ModelParams<F>,
    optimizer: &mut O,
    opts: &StepOptions,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor<F>>> = None;
    for ex in batch {
        let (loss, grads) = match loss_and_gradients(params, ex, opts) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.iter().all(|g| g.all_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        total += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| x.add_assign_tensor(y)),
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.expect("non-empty batch");
    if batch.len() > 1 {
        let inv = F::of(1.0 / n);
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
    }
    optimizer.apply(params, &grads);
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            feature_channels: 8,
            backbone_strides: vec![1, 2, 2, 1],
            head_channels: 8,
            head_depth: 2,
            roi_size: [9, 9],
            mask_size: [17, 17],
            kernel_size: 3,
        }
    }

    #[test]
    fn toy_model_is_small() {
        let p = ModelParams::<f64>::init(&toy_config(), 0).unwrap();
        assert!(p.num_params() <= 5000, "{}", p.num_params());
    }

    fn signed_grads(p: &ModelParams<f64>) -> Vec<Tensor<f64>> {
        p.tensors()
            .iter()
            .map(|t| {
                let data = (0..t.data().len()).map(|i| if i % 3 == 0 { -0.5 } else { 2.0 }).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // Bias correction makes the first update exactly lr * sign(g) (up to eps).
        let before = ModelParams::<f64>::init(&toy_config(), 4).unwrap();
        let grads = signed_grads(&before);
        let mut after = before.clone();
        Adam::new(0.01, None).apply(&mut after, &grads);
        for ((a, b), g) in after.tensors().iter().zip(before.tensors()).zip(&grads) {
            for ((&x, &y), &gv) in a.data().iter().zip(b.data()).zip(g.data()) {
                assert!((y - x - 0.01 * gv.signum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sgd_clips_global_norm() {
        let before = ModelParams::<f64>::init(&toy_config(), 4).unwrap();
        let grads = signed_grads(&before);
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let mut after = before.clone();
        Sgd::new(1.0, 0.0, Some(1.0)).apply(&mut after, &grads);
        for ((a, b), g) in after.tensors().iter().zip(before.tensors()).zip(&grads) {
            for ((&x, &y), &gv) in a.data().iter().zip(b.data()).zip(g.data()) {
                assert!((y - x - gv / norm).abs() < 1e-12);
            }
        }
    }
}
