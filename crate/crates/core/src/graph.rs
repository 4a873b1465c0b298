//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value
//! and enough information to push gradients back to its inputs. Nodes are
//! appended in execution order, so walking the tape backwards is a valid
//! reverse topological order and each op is visited exactly once.
//!
//! Gradients are only tracked for nodes that (transitively) depend on a leaf
//! created with `requires_grad`. Frozen parameters are plain inputs and cost
//! nothing in the backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Probability clamp used by [`Graph::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Zero,
    /// Mirrors interior rows/columns without repeating the border pixel.
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvSpec {
    pub const VALID: ConvSpec = ConvSpec { stride: 1, pad: 0, mode: PadMode::Zero };

    /// Stride 1 with `pad = 1`, shape preserving for 3x3 kernels.
    pub fn same3(mode: PadMode) -> Self {
        ConvSpec { stride: 1, pad: 1, mode }
    }
}

/// Kind of a recorded op, used for instrumentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2,
    BilinearUp2,
    Concat,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale,
    Linear,
    Sum,
    Mean,
    Bce,
    BceLogits,
    Reshape,
    Crop,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    BilinearUp2 { x: Var },
    Concat { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Linear { x: Var, w: Var, b: Option<Var> },
    Sum { x: Var },
    Mean { x: Var },
    Bce { pred: Var, target: Vec<f64> },
    BceLogits { logits: Var, target: Vec<f64>, weights: Vec<f64>, norm: f64 },
    Reshape { x: Var },
    Crop { x: Var, y0: usize, x0: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::BilinearUp2 { .. } => OpKind::BilinearUp2,
            Op::Concat { .. } => OpKind::Concat,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Linear { .. } => OpKind::Linear,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Bce { .. } => OpKind::Bce,
            Op::BceLogits { .. } => OpKind::BceLogits,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Crop { .. } => OpKind::Crop,
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed ops. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v` as a tensor; zeros when no gradient reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Number of recorded ops of the given kind.
    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Concat { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::MaxPool2 { x, .. }
            | Op::BilinearUp2 { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Crop { x, .. } => vec![x],
            Op::Bce { pred, .. } => vec![pred],
            Op::BceLogits { logits, .. } => vec![logits],
        }
    }

    // ---------------------------------------------------------------- ops

    /// 2-D cross-correlation. `x: [n, cin, h, w]`, `w: [cout, cin, kh, kw]`,
    /// `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = self.value(x).dims4(OP)?;
        let (cout, wcin, kh, kw) = self.value(w).dims4(OP)?;
        if cin != wcin {
            return shape_err(OP, format!("input has {} channels, weight expects {}", cin, wcin));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err(OP, format!("bias shape {:?}, expected [{}]", self.shape(b), cout));
            }
        }
        if spec.stride == 0 {
            return shape_err(OP, "stride must be positive".into());
        }
        if kh > h + 2 * spec.pad || kw > wd + 2 * spec.pad {
            return shape_err(OP, format!("kernel {}x{} larger than padded {}x{}", kh, kw, h, wd));
        }
        if spec.mode == PadMode::Reflect && (spec.pad >= h || spec.pad >= wd) {
            return shape_err(OP, format!("reflective pad {} too large for {}x{}", spec.pad, h, wd));
        }
        let g = ConvGeom {
            c: cin,
            h,
            w: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.pad,
            mode: spec.mode,
            ho: (h + 2 * spec.pad - kh) / spec.stride + 1,
            wo: (wd + 2 * spec.pad - kw) / spec.stride + 1,
        };
        let (k, l) = (g.col_rows(), g.col_len());
        let mut out = vec![0.0; n * cout * l];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * l] };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
            let oi = &mut out[i * cout * l..(i + 1) * cout * l];
            let src = if g.is_pointwise() {
                xi
            } else {
                g.im2col(xi, &mut cols);
                &cols
            };
            kernels::gemm(cout, k, l, wv, false, src, false, 0.0, oi);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for plane in out.chunks_exact_mut(cout * l) {
                for (co, row) in plane.chunks_exact_mut(l).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let value = Tensor::new(&[n, cout, g.ho, g.wo], out)?;
        self.push(Op::Conv2d { x, w, b, spec }, value, OP)
    }

    /// Non-overlapping 2x2 max pooling. Ties go to the first position in
    /// row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "maxpool2";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(OP, format!("spatial extent {}x{} must be even", h, w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(Op::MaxPool2 { x, argmax }, value, OP)
    }

    /// Bilinear upsampling by a factor of two with half-pixel centers.
    pub fn bilinear_up2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "bilinear_up2";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if h == 0 || w == 0 {
            return shape_err(OP, "empty spatial extent".into());
        }
        let (ty, tx) = (kernels::up2_taps(h), kernels::up2_taps(w));
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        let mut tmp = vec![0.0; 2 * h * w];
        for (src, dst) in xv.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
            kernels::up2_plane(src, h, w, &ty, &tx, &mut tmp, dst);
        }
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        self.push(Op::BilinearUp2 { x }, value, OP)
    }

    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(OP, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&av[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&bv[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        self.push(Op::Concat { a, b }, value, OP)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(Op::Relu { x }, t, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, kernels::sigmoid);
        self.push(Op::Sigmoid { x }, t, "sigmoid")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.map(x, |v| v * factor);
        self.push(Op::Scale { x, factor }, t, "scale")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        self.push(Op::Add { a, b }, t, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul { a, b }, t, "mul")
    }

    /// Fully connected layer: `x: [n, ...]` flattened per item to `in`,
    /// `w: [out, in]`, `b: [out]`; returns `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.value(x);
        let n = xs.shape()[0];
        let fan_in = xs.numel_per_item();
        let (out_dim, w_in) = match self.shape(w) {
            &[o, i] => (o, i),
            s => return shape_err(OP, format!("weight must be 2-D, got {:?}", s)),
        };
        if w_in != fan_in {
            return shape_err(OP, format!("input has {} features, weight expects {}", fan_in, w_in));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return shape_err(OP, format!("bias shape {:?}, expected [{}]", self.shape(b), out_dim));
            }
        }
        let mut out = vec![0.0; n * out_dim];
        kernels::gemm(n, fan_in, out_dim, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(out_dim) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::new(&[n, out_dim], out)?;
        self.push(Op::Linear { x, w, b }, value, OP)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return shape_err("mean", "empty tensor".into());
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean { x }, Tensor::scalar(s), "mean")
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    /// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        const OP: &str = "bce_loss";
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return shape_err(OP, format!("{:?} vs {:?}", p.shape(), target.shape()));
        }
        if p.is_empty() {
            return shape_err(OP, "empty tensor".into());
        }
        if let Some(v) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("bce_loss prediction {} outside (0, 1)", v)));
        }
        if let Some(v) = target.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("bce_loss target {} outside [0, 1]", v)));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p))
            })
            .sum();
        let value = Tensor::scalar(total / p.len() as f64);
        self.push(Op::Bce { pred, target: target.data().to_vec() }, value, OP)
    }

    /// Weighted binary cross-entropy on logits:
    /// `sum_i weights_i * bce(sigmoid(logits_i), target_i) / norm`.
    /// Mathematically `bce_loss` after `sigmoid`, without the clamp.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64], weights: &[f64], norm: f64) -> Result<Var> {
        const OP: &str = "bce_with_logits";
        let z = self.value(logits).data();
        if z.len() != target.len() || z.len() != weights.len() {
            return shape_err(
                OP,
                format!("{} logits, {} targets, {} weights", z.len(), target.len(), weights.len()),
            );
        }
        if norm <= 0.0 {
            return Err(Error::Input(format!("{} normalizer must be positive, got {}", OP, norm)));
        }
        let total: f64 = z
            .iter()
            .zip(target)
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&z, &t), &w)| w * (kernels::softplus(z) - t * z))
            .sum();
        let op = Op::BceLogits { logits, target: target.to_vec(), weights: weights.to_vec(), norm };
        self.push(op, Tensor::scalar(total / norm), OP)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape { x }, t, "reshape")
    }

    /// Spatial crop of a 4-D tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x).crop(y0, x0, h, w)?;
        self.push(Op::Crop { x, y0, x0 }, t, "crop")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        Tensor::new(ta.shape(), ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from the scalar `loss`, accumulating into every
    /// reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.accumulate(loss, vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let contributions = self.backprop(id, &g);
            self.nodes[id].grad = Some(g);
            for (v, c) in contributions {
                self.accumulate(v, c);
            }
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(g, c)| *g += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient contributions of node `id` (with output gradient `g`) to
    /// its inputs that require gradients.
    fn backprop(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, spec } => self.conv2d_backward(x, w, b, spec, node, g, &mut out),
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i as usize] += gv;
                }
                out.push((*x, dx));
            }
            &Op::BilinearUp2 { x } => {
                let (_, _, h, w) = self.value(x).dims4("bilinear_up2").expect("4-D");
                let (ty, tx) = (kernels::up2_taps(h), kernels::up2_taps(w));
                let mut dx = vec![0.0; self.value(x).len()];
                let mut tmp = vec![0.0; 2 * h * w];
                for (go, gx) in g.chunks_exact(4 * h * w).zip(dx.chunks_exact_mut(h * w)) {
                    kernels::up2_plane_adjoint(go, h, w, &ty, &tx, &mut tmp, gx);
                }
                out.push((x, dx));
            }
            &Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(a).dims4("concat").expect("4-D");
                let cb = self.shape(b)[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                if wants(a) {
                    let da = (0..n).flat_map(|i| g[i * (sa + sb)..i * (sa + sb) + sa].iter().copied()).collect();
                    out.push((a, da));
                }
                if wants(b) {
                    let db = (0..n).flat_map(|i| g[i * (sa + sb) + sa..(i + 1) * (sa + sb)].iter().copied()).collect();
                    out.push((b, db));
                }
            }
            &Op::Relu { x } => {
                let y = node.value.data();
                out.push((x, g.iter().zip(y).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect()));
            }
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                out.push((x, g.iter().zip(y).map(|(&g, &y)| g * y * (1.0 - y)).collect()));
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                out.push((a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                out.push((b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            &Op::Scale { x, factor } => out.push((x, g.iter().map(|g| g * factor).collect())),
            &Op::Linear { x, w, b } => {
                let xs = self.value(x);
                let (n, fan_in) = (xs.shape()[0], xs.numel_per_item());
                let out_dim = self.shape(w)[0];
                if wants(x) {
                    let mut dx = vec![0.0; n * fan_in];
                    kernels::gemm(n, out_dim, fan_in, g, false, self.value(w).data(), false, 0.0, &mut dx);
                    out.push((x, dx));
                }
                if wants(w) {
                    let mut dw = vec![0.0; out_dim * fan_in];
                    kernels::gemm(out_dim, n, fan_in, g, true, xs.data(), false, 0.0, &mut dw);
                    out.push((w, dw));
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = vec![0.0; out_dim];
                    for row in g.chunks_exact(out_dim) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    out.push((b, db));
                }
            }
            &Op::Sum { x } => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Mean { x } => {
                let n = self.value(x).len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            g[0] * (p - t) / (p * (1.0 - p)) / n
                        }
                    })
                    .collect();
                out.push((*pred, d));
            }
            Op::BceLogits { logits, target, weights, norm } => {
                let z = self.value(*logits).data();
                let d = z
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&z, &t), &w)| g[0] * w * (kernels::sigmoid(z) - t) / norm)
                    .collect();
                out.push((*logits, d));
            }
            &Op::Reshape { x } => out.push((x, g.to_vec())),
            &Op::Crop { x, y0, x0 } => {
                let (n, c, h, w) = self.value(x).dims4("crop").expect("4-D");
                let (_, _, ch, cw) = node.value.dims4("crop").expect("4-D");
                let mut dx = vec![0.0; n * c * h * w];
                for (p, gp) in g.chunks_exact(ch * cw).enumerate() {
                    for y in 0..ch {
                        let dst = p * h * w + (y0 + y) * w + x0;
                        dx[dst..dst + cw].copy_from_slice(&gp[y * cw..(y + 1) * cw]);
                    }
                }
                out.push((x, dx));
            }
        }
        out.retain(|(v, _)| wants(*v));
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        node: &Node,
        g: &[f64],
        out: &mut Vec<(Var, Vec<f64>)>,
    ) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let (n, cin, h, wd) = self.value(x).dims4("conv2d").expect("4-D");
        let (cout, _, kh, kw) = self.value(w).dims4("conv2d").expect("4-D");
        let (_, _, ho, wo) = node.value.dims4("conv2d").expect("4-D");
        let geom = ConvGeom { c: cin, h, w: wd, kh, kw, stride: spec.stride, pad: spec.pad, mode: spec.mode, ho, wo };
        let (k, l) = (geom.col_rows(), geom.col_len());
        let (want_x, want_w) = (wants(x), wants(w));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wv.len()] } else { Vec::new() };
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * l] };
        let mut dcols = if want_x && !pointwise { vec![0.0; k * l] } else { Vec::new() };
        let isz = cin * h * wd;
        for i in 0..n {
            let gi = &g[i * cout * l..(i + 1) * cout * l];
            if want_w {
                let src = if pointwise {
                    &xv[i * isz..(i + 1) * isz]
                } else {
                    geom.im2col(&xv[i * isz..(i + 1) * isz], &mut cols);
                    &cols[..]
                };
                kernels::gemm(cout, l, k, gi, false, src, true, 1.0, &mut dw);
            }
            if want_x {
                let dxi = &mut dx[i * isz..(i + 1) * isz];
                if pointwise {
                    kernels::gemm(k, cout, l, wv, true, gi, false, 1.0, dxi);
                } else {
                    kernels::gemm(k, cout, l, wv, true, gi, false, 0.0, &mut dcols);
                    geom.col2im(&dcols, dxi);
                }
            }
        }
        if want_x {
            out.push((x, dx));
        }
        if want_w {
            out.push((w, dw));
        }
        if let Some(b) = b.filter(|&b| wants(b)) {
            let mut db = vec![0.0; cout];
            for gi in g.chunks_exact(cout * l) {
                for (co, row) in gi.chunks_exact(l).enumerate() {
                    db[co] += row.iter().sum::<f64>();
                }
            }
            out.push((b, db));
        }
    }
}
