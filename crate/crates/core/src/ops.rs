//! Forward and backward kernels for the differentiable operations.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autodiff::Graph`]
//! records them on a tape and calls the backward kernels in reverse order.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`; output size is `ceil(n / stride)`.
    Same,
    /// No padding; output size is `(n - k) / stride + 1`.
    Valid,
}

/// Axis-aligned sampling region in pixel-edge coordinates: pixel `i` spans
/// `[i, i + 1)` and has its center at `i + 0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extent {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Extent {
    pub fn full(h: usize, w: usize) -> Self {
        Extent {
            x0: 0.0,
            y0: 0.0,
            x1: w as f64,
            y1: h as f64,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Extent {
            x0: self.x0 * factor,
            y0: self.y0 * factor,
            x1: self.x1 * factor,
            y1: self.y1 * factor,
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        let ok = self.width() > 0.0 && self.height() > 0.0;
        if !ok || ![self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateBox(format!("{self:?}")));
        }
        Ok(())
    }

    /// Half-open range of pixel indices along one axis whose centers fall
    /// inside `[lo, hi)`, clipped to `0..n`.
    pub(crate) fn pixel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
        let start = (lo - 0.5).ceil().max(0.0) as usize;
        let end = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
        start.min(end)..end
    }

    pub fn rows(&self, h: usize) -> std::ops::Range<usize> {
        Self::pixel_span(self.y0, self.y1, h)
    }

    pub fn cols(&self, w: usize) -> std::ops::Range<usize> {
        Self::pixel_span(self.x0, self.x1, w)
    }
}

pub fn conv_output_size(n: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => n.div_ceil(stride),
        Padding::Valid => {
            if n < k {
                0
            } else {
                (n - k) / stride + 1
            }
        }
    }
}

fn conv_geometry<F: Real>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (h, w, cin) = input.dims3();
    let (k, kw, kcin, cout) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::Shape(format!("kernel must be rank 4, got {:?}", kernel.shape()))),
    };
    if k != kw || k % 2 == 0 {
        return Err(Error::Shape(format!("kernel must be square with odd size, got {k}x{kw}")));
    }
    if kcin != cin {
        return Err(Error::Shape(format!(
            "input has {cin} channels but kernel expects {kcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be >= 1".into()));
    }
    let ho = conv_output_size(h, k, stride, padding);
    let wo = conv_output_size(w, k, stride, padding);
    Ok((h, w, cin, k, cout, ho, wo, stride))
}

fn conv_pad(k: usize, padding: Padding) -> isize {
    match padding {
        Padding::Same => ((k - 1) / 2) as isize,
        Padding::Valid => 0,
    }
}

/// 2-D cross-correlation of `[h, w, cin]` with `[k, k, cin, cout]`.
pub fn conv2d<F: Real>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<F>> {
    let (h, w, cin, k, cout, ho, wo, s) = conv_geometry(input, kernel, stride, padding)?;
    let pad = conv_pad(k, padding);
    let inp = input.data();
    let ker = kernel.data();
    let mut out = vec![F::zero(); ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * cout..][..cout];
            for ky in 0..k {
                let iy = (oy * s) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &inp[(iy as usize * w + ix as usize) * cin..][..cin];
                    let kbase = (ky * k + kx) * cin * cout;
                    for (ci, &a) in px.iter().enumerate() {
                        if a == F::zero() {
                            continue;
                        }
                        let krow = &ker[kbase + ci * cout..][..cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += a * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<F>,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (h, w, cin, k, cout, ho, wo, s) =
        conv_geometry(input, kernel, stride, padding).expect("validated in forward");
    let pad = conv_pad(k, padding);
    let inp = input.data();
    let ker = kernel.data();
    let g = grad_out.data();
    let mut gin = if want_input { vec![F::zero(); inp.len()] } else { Vec::new() };
    let mut gker = if want_kernel { vec![F::zero(); ker.len()] } else { Vec::new() };
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &g[(oy * wo + ox) * cout..][..cout];
            if go.iter().all(|&v| v == F::zero()) {
                continue;
            }
            for ky in 0..k {
                let iy = (oy * s) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                        if want_input {
                            let krow = &ker[krange.clone()];
                            let dot: F = krow.iter().zip(go).map(|(&a, &b)| a * b).sum();
                            gin[ibase + ci] += dot;
                        }
                        if want_kernel {
                            let a = inp[ibase + ci];
                            if a != F::zero() {
                                for (gk, &gv) in gker[krange].iter_mut().zip(go) {
                                    *gk += a * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gin = want_input.then(|| Tensor::new(input.shape().to_vec(), gin).unwrap());
    let gker = want_kernel.then(|| Tensor::new(kernel.shape().to_vec(), gker).unwrap());
    (gin, gker)
}

/// One bilinear interpolation tap along an axis: `(1 - w) * v[lo] + w * v[hi]`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
}

/// Interpolation tap for a sample at pixel-center coordinate `t` on an axis of
/// `n` pixels; samples beyond the outer centers clamp to the border value.
fn tap_at(t: f64, n: usize) -> Tap {
    if t <= 0.0 || n == 1 {
        return Tap { lo: 0, hi: 0, w: 0.0 };
    }
    let last = (n - 1) as f64;
    if t >= last {
        return Tap {
            lo: n - 1,
            hi: n - 1,
            w: 0.0,
        };
    }
    let lo = t.floor();
    Tap {
        lo: lo as usize,
        hi: lo as usize + 1,
        w: t - lo,
    }
}

/// Taps for `n_out` evenly spaced cell-center samples over `[e0, e1)`.
fn crop_taps(e0: f64, e1: f64, n_out: usize, n_src: usize) -> Vec<Tap> {
    let step = (e1 - e0) / n_out as f64;
    (0..n_out)
        .map(|j| tap_at(e0 + (j as f64 + 0.5) * step - 0.5, n_src))
        .collect()
}

/// Taps that map each canvas pixel in `span` back into a patch of `n_patch`
/// pixels stretched over `[e0, e1)`.
fn paste_taps(e0: f64, e1: f64, span: std::ops::Range<usize>, n_patch: usize) -> Vec<Tap> {
    let scale = n_patch as f64 / (e1 - e0);
    span.map(|p| tap_at((p as f64 + 0.5 - e0) * scale - 0.5, n_patch))
        .collect()
}

/// RoI-align style crop: one bilinear sample at the center of each of the
/// `out_h x out_w` cells tiling `extent`. No coordinate rounding.
pub fn bilinear_crop<F: Real>(
    source: &Tensor<F>,
    extent: &Extent,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<F>> {
    extent.check()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput("crop output size must be >= 1".into()));
    }
    let (h, w, c) = source.dims3();
    let rows = crop_taps(extent.y0, extent.y1, out_h, h);
    let cols = crop_taps(extent.x0, extent.x1, out_w, w);
    let src = source.data();
    let mut out = vec![F::zero(); out_h * out_w * c];
    for (i, ry) in rows.iter().enumerate() {
        for (j, rx) in cols.iter().enumerate() {
            let o = &mut out[(i * out_w + j) * c..][..c];
            for (y, wy) in [(ry.lo, 1.0 - ry.w), (ry.hi, ry.w)] {
                if wy == 0.0 {
                    continue;
                }
                for (x, wx) in [(rx.lo, 1.0 - rx.w), (rx.hi, rx.w)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let wt = F::of(wy * wx);
                    let s = &src[(y * w + x) * c..][..c];
                    for (ov, &sv) in o.iter_mut().zip(s) {
                        *ov += wt * sv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

pub fn bilinear_crop_backward<F: Real>(
    source_shape: &[usize],
    extent: &Extent,
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (h, w, c) = (source_shape[0], source_shape[1], source_shape[2]);
    let (out_h, out_w, _) = grad_out.dims3();
    let rows = crop_taps(extent.y0, extent.y1, out_h, h);
    let cols = crop_taps(extent.x0, extent.x1, out_w, w);
    let g = grad_out.data();
    let mut gs = vec![F::zero(); h * w * c];
    for (i, ry) in rows.iter().enumerate() {
        for (j, rx) in cols.iter().enumerate() {
            let go = &g[(i * out_w + j) * c..][..c];
            for (y, wy) in [(ry.lo, 1.0 - ry.w), (ry.hi, ry.w)] {
                if wy == 0.0 {
                    continue;
                }
                for (x, wx) in [(rx.lo, 1.0 - rx.w), (rx.hi, rx.w)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let wt = F::of(wy * wx);
                    let s = &mut gs[(y * w + x) * c..][..c];
                    for (sv, &gv) in s.iter_mut().zip(go) {
                        *sv += wt * gv;
                    }
                }
            }
        }
    }
    Tensor::new(source_shape.to_vec(), gs).unwrap()
}

/// Resizes `patch` bilinearly onto the pixels of a `canvas_h x canvas_w`
/// canvas whose centers fall inside `extent`; every other pixel gets `fill`.
pub fn bilinear_paste<F: Real>(
    patch: &Tensor<F>,
    extent: &Extent,
    canvas_h: usize,
    canvas_w: usize,
    fill: F,
) -> Result<Tensor<F>> {
    extent.check()?;
    let (ph, pw, c) = patch.dims3();
    let rows = extent.rows(canvas_h);
    let cols = extent.cols(canvas_w);
    let row_taps = paste_taps(extent.y0, extent.y1, rows.clone(), ph);
    let col_taps = paste_taps(extent.x0, extent.x1, cols.clone(), pw);
    let src = patch.data();
    let mut out = vec![fill; canvas_h * canvas_w * c];
    for (y, ry) in rows.zip(&row_taps) {
        for (x, rx) in cols.clone().zip(&col_taps) {
            let o = &mut out[(y * canvas_w + x) * c..][..c];
            o.iter_mut().for_each(|v| *v = F::zero());
            for (py, wy) in [(ry.lo, 1.0 - ry.w), (ry.hi, ry.w)] {
                if wy == 0.0 {
                    continue;
                }
                for (px, wx) in [(rx.lo, 1.0 - rx.w), (rx.hi, rx.w)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let wt = F::of(wy * wx);
                    let s = &src[(py * pw + px) * c..][..c];
                    for (ov, &sv) in o.iter_mut().zip(s) {
                        *ov += wt * sv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![canvas_h, canvas_w, c], out)
}

pub fn bilinear_paste_backward<F: Real>(
    patch_shape: &[usize],
    extent: &Extent,
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (ph, pw, c) = (patch_shape[0], patch_shape[1], patch_shape[2]);
    let (canvas_h, canvas_w, _) = grad_out.dims3();
    let rows = extent.rows(canvas_h);
    let cols = extent.cols(canvas_w);
    let row_taps = paste_taps(extent.y0, extent.y1, rows.clone(), ph);
    let col_taps = paste_taps(extent.x0, extent.x1, cols.clone(), pw);
    let g = grad_out.data();
    let mut gp = vec![F::zero(); ph * pw * c];
    for (y, ry) in rows.zip(&row_taps) {
        for (x, rx) in cols.clone().zip(&col_taps) {
            let go = &g[(y * canvas_w + x) * c..][..c];
            for (py, wy) in [(ry.lo, 1.0 - ry.w), (ry.hi, ry.w)] {
                if wy == 0.0 {
                    continue;
                }
                for (px, wx) in [(rx.lo, 1.0 - rx.w), (rx.hi, rx.w)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let wt = F::of(wy * wx);
                    let s = &mut gp[(py * pw + px) * c..][..c];
                    for (sv, &gv) in s.iter_mut().zip(go) {
                        *sv += wt * gv;
                    }
                }
            }
        }
    }
    Tensor::new(patch_shape.to_vec(), gp).unwrap()
}

/// Per-pixel softmax over the last axis, with max subtraction.
pub fn channel_softmax<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let n = *logits.shape().last().expect("non-empty shape");
    let mut out = logits.data().to_vec();
    for px in out.chunks_mut(n) {
        let m = px.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut total = F::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in px.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).unwrap()
}

pub fn channel_softmax_backward<F: Real>(probs: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let n = *probs.shape().last().unwrap();
    let mut gin = vec![F::zero(); probs.len()];
    for ((gi, p), g) in gin
        .chunks_mut(n)
        .zip(probs.data().chunks(n))
        .zip(grad_out.data().chunks(n))
    {
        let dot: F = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for k in 0..n {
            gi[k] = p[k] * (g[k] - dot);
        }
    }
    Tensor::new(probs.shape().to_vec(), gin).unwrap()
}
