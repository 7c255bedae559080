use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Shape configuration of the backbone and region head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone output channels `C`.
    pub feature_channels: usize,
    /// Stride of each backbone conv layer; their product is the reduction `r`.
    pub backbone_strides: Vec<usize>,
    /// Width of the hidden head layers.
    pub head_channels: usize,
    /// Head conv layers applied at RoI resolution (a final 1-channel conv
    /// follows at mask resolution).
    pub head_depth: usize,
    /// RoI feature size `(h, w)`.
    pub roi_size: [usize; 2],
    /// Logit map size `(h', w')`.
    pub mask_size: [usize; 2],
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_channels: 16,
            backbone_strides: vec![1, 2, 2, 1],
            head_channels: 16,
            head_depth: 3,
            roi_size: [17, 17],
            mask_size: [33, 33],
            kernel_size: 3,
        }
    }
}

/// One conv layer's static description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

pub const IMAGE_CHANNELS: usize = 3;
/// Positive and negative annotation channels appended to RoI features.
pub const ANNOTATION_CHANNELS: usize = 2;

impl ModelConfig {
    pub fn reduction(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.backbone_strides.is_empty() || self.backbone_strides.contains(&0) {
            return bad("backbone_strides must be non-empty with strides >= 1");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if self.feature_channels == 0 || self.head_channels == 0 {
            return bad("channel widths must be >= 1");
        }
        if self.head_depth == 0 {
            return bad("head_depth must be >= 1");
        }
        if self.roi_size.contains(&0) || self.mask_size.contains(&0) {
            return bad("roi_size and mask_size must be >= 1");
        }
        Ok(())
    }

    pub fn backbone_layers(&self) -> Vec<LayerSpec> {
        let mut cin = IMAGE_CHANNELS;
        self.backbone_strides
            .iter()
            .map(|&stride| {
                let spec = LayerSpec {
                    kernel: self.kernel_size,
                    in_channels: cin,
                    out_channels: self.feature_channels,
                    stride,
                };
                cin = self.feature_channels;
                spec
            })
            .collect()
    }

    pub fn head_layers(&self) -> Vec<LayerSpec> {
        let mut cin = self.feature_channels + ANNOTATION_CHANNELS;
        let mut layers: Vec<LayerSpec> = (0..self.head_depth)
            .map(|_| {
                let spec = LayerSpec {
                    kernel: self.kernel_size,
                    in_channels: cin,
                    out_channels: self.head_channels,
                    stride: 1,
                };
                cin = self.head_channels;
                spec
            })
            .collect();
        layers.push(LayerSpec {
            kernel: self.kernel_size,
            in_channels: self.head_channels,
            out_channels: 1,
            stride: 1,
        });
        layers
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<F: Real = f32> {
    pub kernel: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
}

impl<F: Real> ConvLayer<F> {
    pub fn zeros(spec: &LayerSpec) -> Self {
        ConvLayer {
            kernel: Tensor::zeros(&[spec.kernel, spec.kernel, spec.in_channels, spec.out_channels]),
            bias: Tensor::zeros(&[spec.out_channels]),
            stride: spec.stride,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        let s = self.kernel.shape();
        LayerSpec {
            kernel: s[0],
            in_channels: s[2],
            out_channels: s[3],
            stride: self.stride,
        }
    }
}

/// All trainable tensors of the backbone and head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    pub config: ModelConfig,
    pub backbone: Vec<ConvLayer<F>>,
    pub head: Vec<ConvLayer<F>>,
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            config: config.clone(),
            backbone: config.backbone_layers().iter().map(ConvLayer::zeros).collect(),
            head: config.head_layers().iter().map(ConvLayer::zeros).collect(),
        })
    }

    /// He-normal kernels and zero biases, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in params.backbone.iter_mut().chain(params.head.iter_mut()) {
            let spec = layer.spec();
            let fan_in = (spec.kernel * spec.kernel * spec.in_channels) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for v in layer.kernel.data_mut() {
                *v = F::of(normal.sample(&mut rng));
            }
        }
        Ok(params)
    }

    /// Tensors in a fixed order: per backbone layer (kernel, bias), then per
    /// head layer (kernel, bias).
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.backbone
            .iter()
            .chain(&self.head)
            .flat_map(|l| [&l.kernel, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.backbone
            .iter_mut()
            .chain(self.head.iter_mut())
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let conv = |l: &ConvLayer<F>| ConvLayer {
            kernel: l.kernel.cast(),
            bias: l.bias.cast(),
            stride: l.stride,
        };
        ModelParams {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            head: self.head.iter().map(conv).collect(),
        }
    }

    /// Rebuilds params from tensors in [`ModelParams::tensors`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let expected = params.tensors().len();
        if tensors.len() != expected {
            return Err(Error::Shape(format!("{} tensors, expected {expected}", tensors.len())));
        }
        for (slot, t) in params.tensors_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }
}
