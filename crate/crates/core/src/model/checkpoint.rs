//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`, tensor values little-endian `f32`.
//!
//! ```text
//! magic        b"CSEG"
//! version      1
//! C r h w h' w' kernel_size
//! n_backbone   then per layer: k c_in c_out stride
//! n_head       then per layer: k c_in c_out stride
//! n_tensors    then per tensor: ndim, dims..., values...
//! ```
//!
//! Tensors follow [`ModelParams::tensors`] order. Loading rebuilds the
//! config from the header and rejects any mismatch between header and data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{LayerSpec, ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"CSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.feature_channels,
        cfg.reduction(),
        cfg.roi_size[0],
        cfg.roi_size[1],
        cfg.mask_size[0],
        cfg.mask_size[1],
        cfg.kernel_size,
    ] {
        put(&mut out, v);
    }
    for layers in [&params.backbone, &params.head] {
        put(&mut out, layers.len());
        for l in layers {
            let s = l.spec();
            for v in [s.kernel, s.in_channels, s.out_channels, s.stride] {
                put(&mut out, v);
            }
        }
    }
    let tensors = params.tensors();
    put(&mut out, tensors.len());
    for t in tensors {
        put(&mut out, t.shape().len());
        for &d in t.shape() {
            put(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_layers(r: &mut Reader) -> Result<Vec<LayerSpec>> {
    let n = r.u32()?;
    if n > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    (0..n)
        .map(|_| {
            Ok(LayerSpec {
                kernel: r.u32()?,
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                stride: r.u32()?,
            })
        })
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let c = r.u32()?;
    let reduction = r.u32()?;
    let roi_size = [r.u32()?, r.u32()?];
    let mask_size = [r.u32()?, r.u32()?];
    let kernel_size = r.u32()?;
    let backbone = read_layers(&mut r)?;
    let head = read_layers(&mut r)?;
    if head.len() < 2 {
        return Err(Error::Checkpoint("head needs at least two layers".into()));
    }
    let config = ModelConfig {
        feature_channels: c,
        backbone_strides: backbone.iter().map(|l| l.stride).collect(),
        head_channels: head[0].out_channels,
        head_depth: head.len() - 1,
        roi_size,
        mask_size,
        kernel_size,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    if config.reduction() != reduction || config.backbone_layers() != backbone || config.head_layers() != head {
        return Err(Error::Checkpoint("layer table inconsistent with header".into()));
    }
    let n = r.u32()?;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let ndim = r.u32()?;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        if len * 4 > r.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let data: Vec<f32> = (0..len).map(|_| r.f32()).collect::<Result<_>>()?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    ModelParams::from_tensors(&config, tensors).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
