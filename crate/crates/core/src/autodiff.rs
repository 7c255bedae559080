//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! always topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Graphs are single-use: build one per forward pass.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Extent, Padding};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: Padding },
    AddBias { input: Var, bias: Var },
    Relu(Var),
    Concat(Vec<Var>),
    Crop { source: Var, extent: Extent },
    Paste { patch: Var, extent: Extent },
    Softmax(Var),
    WeightedNll { probs: Var, labels: Arc<Vec<u32>>, weights: Arc<Vec<F>>, floor: F },
    SigmoidBceMean { logits: Var, targets: Arc<Vec<F>> },
    Add(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    clamped_logs: usize,
    branches: Option<DefaultHasher>,
}

/// Gradients produced by [`Graph::backward`]; `None` for nodes that do not
/// depend on any trainable leaf.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            clamped_logs: 0,
            branches: None,
        }
    }

    /// Graph that fingerprints every piecewise branch taken (rectifier signs
    /// and probability clamps); see [`Graph::branch_signature`].
    pub fn with_branch_tracking() -> Self {
        Graph {
            branches: Some(DefaultHasher::new()),
            ..Self::new()
        }
    }

    /// Fingerprint of the branches taken so far, if tracking is enabled. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(|h| h.finish())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probabilities clamped inside `WeightedNll` so far.
    pub fn clamped_log_count(&self) -> usize {
        self.clamped_logs
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        self.push(Op::Conv2d { input, kernel, stride, padding }, out)
    }

    /// Adds a per-channel bias (shape `[c]`) to a `[h, w, c]` tensor.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        let c = *x.shape().last().unwrap();
        if b.len() != c {
            return Err(Error::Shape(format!("bias has {} entries for {c} channels", b.len())));
        }
        let mut out = x.clone();
        for px in out.data_mut().chunks_mut(c) {
            for (v, &bv) in px.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.push(Op::AddBias { input, bias }, out)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v.max(F::zero()));
        if let Some(h) = &mut self.branches {
            self.nodes[input.0].value.data().iter().for_each(|v| (*v > F::zero()).hash(h));
        }
        self.push(Op::Relu(input), out)
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let (h, w, _) = self.value(*first).dims3();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.value(p).dims3();
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!("concat of {ph}x{pw} with {h}x{w}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[px * c..(px + 1) * c]);
            }
        }
        let out = Tensor::new(vec![h, w, total], out)?;
        self.push(Op::Concat(parts.to_vec()), out)
    }

    pub fn bilinear_crop(&mut self, source: Var, extent: Extent, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_crop(self.value(source), &extent, out_h, out_w)?;
        self.push(Op::Crop { source, extent }, out)
    }

    /// Pastes into a canvas filled with the constant `fill`; the fill carries
    /// no gradient.
    pub fn bilinear_paste(
        &mut self,
        patch: Var,
        extent: Extent,
        canvas_h: usize,
        canvas_w: usize,
        fill: F,
    ) -> Result<Var> {
        let out = ops::bilinear_paste(self.value(patch), &extent, canvas_h, canvas_w, fill)?;
        self.push(Op::Paste { patch, extent }, out)
    }

    pub fn channel_softmax(&mut self, logits: Var) -> Result<Var> {
        let out = ops::channel_softmax(self.value(logits));
        self.push(Op::Softmax(logits), out)
    }

    /// `sum_p weights[p] * -ln(max(probs[p, labels[p]], floor))` over the
    /// pixels of a `[h, w, n]` probability tensor, with 0-based labels.
    pub fn weighted_nll(&mut self, probs: Var, labels: Arc<Vec<u32>>, weights: Arc<Vec<F>>, floor: F) -> Result<Var> {
        let p = self.value(probs);
        let n = *p.shape().last().unwrap();
        let pixels = p.len() / n;
        if labels.len() != pixels || weights.len() != pixels {
            return Err(Error::Shape(format!(
                "{} labels / {} weights for {pixels} pixels",
                labels.len(),
                weights.len()
            )));
        }
        let mut total = F::zero();
        let mut clamped = Vec::new();
        for (i, (&y, &w)) in labels.iter().zip(weights.iter()).enumerate() {
            let y = y as usize;
            if y >= n {
                return Err(Error::InvalidInput(format!("label {} exceeds {n} channels", y + 1)));
            }
            let pv = p.data()[i * n + y];
            if pv < floor {
                clamped.push(i);
            }
            total += w * -pv.max(floor).ln();
        }
        self.clamped_logs += clamped.len();
        if let Some(h) = &mut self.branches {
            clamped.hash(h);
        }
        self.push(Op::WeightedNll { probs, labels, weights, floor }, Tensor::scalar(total))
    }

    /// Mean sigmoid binary cross-entropy of `logits` against `targets`.
    pub fn sigmoid_bce_mean(&mut self, logits: Var, targets: Arc<Vec<F>>) -> Result<Var> {
        let l = self.value(logits);
        if l.len() != targets.len() {
            return Err(Error::Shape(format!("{} logits vs {} targets", l.len(), targets.len())));
        }
        let total: F = l
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &t)| x.max(F::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let mean = total / F::of(l.len() as f64);
        self.push(Op::SigmoidBceMean { logits, targets }, Tensor::scalar(mean))
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("sum of zero tensors".into()))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            if v.shape() != out.shape() {
                return Err(Error::Shape(format!("add {:?} to {:?}", v.shape(), out.shape())));
            }
            out.add_assign_tensor(v);
        }
        self.push(Op::Add(parts.to_vec()), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("mul {:?} by {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.push(Op::Scale(input, factor), out)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(Op::Sum(input), out)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let mut accumulate = |v: Var, t: Tensor<F>| match &mut grads[v.0] {
            Some(acc) => acc.add_assign_tensor(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, stride, padding } => {
                let (gi, gk) = ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    stride,
                    padding,
                    g,
                    self.wants(input),
                    self.wants(kernel),
                );
                if let Some(gi) = gi {
                    accumulate(input, gi);
                }
                if let Some(gk) = gk {
                    accumulate(kernel, gk);
                }
            }
            &Op::AddBias { input, bias } => {
                if self.wants(bias) {
                    let c = self.value(bias).len();
                    let mut gb = vec![F::zero(); c];
                    for px in g.data().chunks(c) {
                        for (a, &b) in gb.iter_mut().zip(px) {
                            *a += b;
                        }
                    }
                    accumulate(bias, Tensor::new(vec![c], gb).unwrap());
                }
                if self.wants(input) {
                    accumulate(input, g.clone());
                }
            }
            &Op::Relu(input) => {
                let x = self.value(input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                accumulate(input, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Concat(parts) => {
                let (h, w, total) = g.dims3();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dims3().2;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(h * w * c);
                        for px in g.data().chunks(total) {
                            gp.extend_from_slice(&px[offset..offset + c]);
                        }
                        accumulate(p, Tensor::new(vec![h, w, c], gp).unwrap());
                    }
                    offset += c;
                }
            }
            &Op::Crop { source, extent } => {
                let gs = ops::bilinear_crop_backward(self.value(source).shape(), &extent, g);
                accumulate(source, gs);
            }
            &Op::Paste { patch, extent } => {
                let gp = ops::bilinear_paste_backward(self.value(patch).shape(), &extent, g);
                accumulate(patch, gp);
            }
            &Op::Softmax(input) => {
                accumulate(input, ops::channel_softmax_backward(&node.value, g));
            }
            Op::WeightedNll { probs, labels, weights, floor } => {
                let p = self.value(*probs);
                let n = *p.shape().last().unwrap();
                let scale = g.data()[0];
                let mut gp = vec![F::zero(); p.len()];
                for (i, (&y, &w)) in labels.iter().zip(weights.iter()).enumerate() {
                    let k = i * n + y as usize;
                    let pv = p.data()[k];
                    if pv >= *floor {
                        gp[k] = -scale * w / pv;
                    }
                }
                accumulate(*probs, Tensor::new(p.shape().to_vec(), gp).unwrap());
            }
            Op::SigmoidBceMean { logits, targets } => {
                let l = self.value(*logits);
                let scale = g.data()[0] / F::of(l.len() as f64);
                let data = l
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(&x, &t)| scale * (sigmoid(x) - t))
                    .collect();
                accumulate(*logits, Tensor::new(l.shape().to_vec(), data).unwrap());
            }
            Op::Add(parts) => {
                for &p in parts {
                    if self.wants(p) {
                        accumulate(p, g.clone());
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = y.data().iter().zip(g.data()).map(|(&q, &gv)| q * gv).collect();
                    accumulate(a, Tensor::new(x.shape().to_vec(), d).unwrap());
                }
                if self.wants(b) {
                    let d = x.data().iter().zip(g.data()).map(|(&p, &gv)| p * gv).collect();
                    accumulate(b, Tensor::new(y.shape().to_vec(), d).unwrap());
                }
            }
            &Op::Scale(input, factor) => {
                accumulate(input, g.map(|v| v * factor));
            }
            &Op::Sum(input) => {
                let shape = self.value(input).shape().to_vec();
                accumulate(input, Tensor::full(&shape, g.data()[0]));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn inputs<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        Op::AddBias { input, bias } => vec![*input, *bias],
        Op::Relu(v) | Op::Softmax(v) | Op::Scale(v, _) | Op::Sum(v) => vec![*v],
        Op::Concat(vs) | Op::Add(vs) => vs.clone(),
        Op::Crop { source, .. } => vec![*source],
        Op::Paste { patch, .. } => vec![*patch],
        Op::WeightedNll { probs, .. } => vec![*probs],
        Op::SigmoidBceMean { logits, .. } => vec![*logits],
        Op::Mul(a, b) => vec![*a, *b],
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::AddBias { .. } => "add_bias",
        Op::Relu(_) => "relu",
        Op::Concat(_) => "concat",
        Op::Crop { .. } => "bilinear_crop",
        Op::Paste { .. } => "bilinear_paste",
        Op::Softmax(_) => "softmax",
        Op::WeightedNll { .. } => "weighted_nll",
        Op::SigmoidBceMean { .. } => "sigmoid_bce",
        Op::Add(_) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
    }
}

/// Compares reverse-mode gradients against central finite differences for
/// every entry of every parameter tensor.
///
/// `loss_fn` receives the graph, the parameter variables (in the order of
/// `params`) and must return a scalar node. Returns the maximum relative
/// error, using `max(|a|, |b|, 1e-8)` as the denominator.
///
/// Differences use the fourth-order central stencil
/// `(8 (f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h` starting at `h = epsilon`.
/// When a probe lands on a different rectifier or clamp branch than the
/// unperturbed point, `h` shrinks tenfold (at most six times) so the stencil
/// stays on the smooth piece containing the point.
pub fn gradient_check<F, L>(mut loss_fn: L, params: &[Tensor<F>], epsilon: f64) -> Result<f64>
where
    F: Real,
    L: FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    if epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidInput("epsilon must be > 0".into()));
    }
    let (analytic, base_sig) = {
        let mut g = Graph::with_branch_tracking();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = loss_fn(&mut g, &vars)?;
        if !g.value(out).data()[0].as_f64().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let grads = g.backward(out)?;
        let analytic: Vec<Tensor<F>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        (analytic, g.branch_signature())
    };

    let mut eval = |ps: &[Tensor<F>]| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::with_branch_tracking();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = loss_fn(&mut g, &vars)?;
        let v = g.value(out).data()[0].as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((v, g.branch_signature()))
    };

    const MAX_SHRINKS: usize = 6;
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            let mut h = epsilon;
            let mut numeric = 0.0;
            for attempt in 0..=MAX_SHRINKS {
                let mut f = [0.0; 4];
                let mut same_branch = true;
                for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                    probe[t].data_mut()[i] = F::of(orig.as_f64() + k * h);
                    let (v, sig) = eval(&probe)?;
                    *slot = v;
                    same_branch &= sig == base_sig;
                }
                probe[t].data_mut()[i] = orig;
                numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
                if same_branch || attempt == MAX_SHRINKS {
                    break;
                }
                h *= 0.1;
            }
            let a = analytic[t].data()[i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
