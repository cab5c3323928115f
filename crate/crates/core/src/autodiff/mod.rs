//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Each forward operation pushes
//! one node holding its value and whatever it needs for the backward rule;
//! inputs always precede the node that consumes them, so a single reverse
//! sweep in index order visits every node after all of its consumers.

mod kernels;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use kernels::{mm, mm_at, mm_bt};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node on a specific tape generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance for one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    /// Mean 0, variance 1: usable in eval mode straight away.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: true,
        }
    }

    /// Stats that must see a training batch before eval mode may use them.
    pub fn empty(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![0.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Conv1d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Tanh {
        a: usize,
    },
    Relu {
        a: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Reshape {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Slice {
        a: usize,
        start: usize,
    },
    PadLast {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    NormalizeSum {
        a: usize,
        fallback: Vec<bool>,
    },
    WindowMix {
        weights: usize,
        seq: usize,
    },
    JointNorms {
        a: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Conv1d { input, kernel, bias } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::WindowMix { weights, seq } => vec![*weights, *seq],
            Op::Concat { inputs } => inputs.clone(),
            Op::Scale { a, .. }
            | Op::Tanh { a }
            | Op::Relu { a }
            | Op::Dropout { a, .. }
            | Op::Reshape { a }
            | Op::Slice { a, .. }
            | Op::PadLast { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::NormalizeSum { a, .. }
            | Op::JointNorms { a } => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: fresh_id(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every node. Handles from before the reset become detached.
    pub fn reset(&mut self) {
        self.id = fresh_id();
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Forward value of `v`.
    ///
    /// Panics if `v` belongs to a different tape or an earlier generation.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "Var used on a tape it does not belong to");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {} is detached from this tape", v.index)));
        }
        Ok(v.index)
    }

    pub(crate) fn node_value(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, leaf_grad: bool) -> Var {
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape may be swept once; call [`Tape::reset`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; reset it first".into()));
        }
        let loss_value = &self.nodes[root].value;
        if !loss_value.is_scalar() {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            grads[root] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));
        }
        for i in (0..=root).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.propagate(i, g, lower);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], index: usize, delta: Vec<f64>) {
        if !self.nodes[index].requires_grad {
            return;
        }
        match &mut grads[index] {
            Some(t) => {
                for (x, d) in t.data_mut().iter_mut().zip(delta) {
                    *x += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[index].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, delta));
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let geo = MatMulGeometry::of(av.shape(), bv.shape()).expect("shapes validated in forward");
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..geo.batch {
                        let gs = &gd[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n];
                        let bs = &bv.data()[bi * geo.b_stride..bi * geo.b_stride + geo.k * geo.n];
                        let out = &mut da[bi * geo.a_stride..bi * geo.a_stride + geo.m * geo.k];
                        mm_bt(gs, bs, geo.m, geo.n, geo.k, out);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..geo.batch {
                        let gs = &gd[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n];
                        let as_ = &av.data()[bi * geo.a_stride..bi * geo.a_stride + geo.m * geo.k];
                        let out = &mut db[bi * geo.b_stride..bi * geo.b_stride + geo.k * geo.n];
                        mm_at(as_, gs, geo.m, geo.k, geo.n, out);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv1d { input, kernel, bias } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*kernel].value;
                let (batch, c_in, t) = ops::conv_input_dims(x.shape());
                let (c_out, _, width) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let t_out = t - width + 1;
                let need_x = self.nodes[*input].requires_grad;
                let need_w = self.nodes[*kernel].requires_grad;
                let mut dx = vec![0.0; if need_x { x.numel() } else { 0 }];
                let mut dw = vec![0.0; if need_w { w.numel() } else { 0 }];
                for b in 0..batch {
                    for o in 0..c_out {
                        let grow = &gd[(b * c_out + o) * t_out..(b * c_out + o + 1) * t_out];
                        for c in 0..c_in {
                            let xrow_off = (b * c_in + c) * t;
                            for k in 0..width {
                                let widx = (o * c_in + c) * width + k;
                                if need_w {
                                    let xs = &x.data()[xrow_off + k..xrow_off + k + t_out];
                                    dw[widx] += grow.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>();
                                }
                                if need_x {
                                    let wv = w.data()[widx];
                                    let dxs = &mut dx[xrow_off + k..xrow_off + k + t_out];
                                    for (d, g) in dxs.iter_mut().zip(grow) {
                                        *d += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *input, dx);
                }
                if need_w {
                    self.accumulate(grads, *kernel, dw);
                }
                if let Some(bias) = bias {
                    let mut db = vec![0.0; c_out];
                    for b in 0..batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            let off = (b * c_out + o) * t_out;
                            *d += gd[off..off + t_out].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, reduce_to(gd, self.nodes[*a].value.numel()));
                self.accumulate(grads, *b, reduce_to(gd, self.nodes[*b].value.numel()));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, reduce_to(gd, self.nodes[*a].value.numel()));
                let neg: Vec<f64> = gd.iter().map(|g| -g).collect();
                self.accumulate(grads, *b, reduce_to(&neg, self.nodes[*b].value.numel()));
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let pick = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                let ga: Vec<f64> = gd.iter().enumerate().map(|(j, g)| g * pick(bv, j)).collect();
                let gb: Vec<f64> = gd.iter().enumerate().map(|(j, g)| g * pick(av, j)).collect();
                self.accumulate(grads, *a, reduce_to(&ga, av.len()));
                self.accumulate(grads, *b, reduce_to(&gb, bv.len()));
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * factor).collect());
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu { a } => {
                let x = self.nodes[*a].value.data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (outer, c, inner) = split_axis(shape, *axis);
                let n = (outer * inner) as f64;
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let off = (o * c + ch) * inner;
                        for j in off..off + inner {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                            let dxh = gd[j] * gam[ch];
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xhat[j];
                        }
                    }
                }
                if self.nodes[*input].requires_grad {
                    let mut dx = vec![0.0; gd.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let off = (o * c + ch) * inner;
                            for j in off..off + inner {
                                let dxh = gd[j] * gam[ch];
                                dx[j] = if *train {
                                    inv_std[ch] / n * (n * dxh - sum_dxhat[ch] - xhat[j] * sum_dxhat_xhat[ch])
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { a, mask } => {
                let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::Concat { inputs } => {
                let out_last = *node.value.shape().last().unwrap();
                let rows = gd.len() / out_last;
                let mut col = 0;
                for &inp in inputs {
                    let w = *self.nodes[inp].value.shape().last().unwrap();
                    if self.nodes[inp].requires_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * out_last + col..r * out_last + col + w]);
                        }
                        self.accumulate(grads, inp, d);
                    }
                    col += w;
                }
            }
            Op::Slice { a, start } => {
                let src = &self.nodes[*a].value;
                let src_last = *src.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let rows = gd.len() / len;
                let mut d = vec![0.0; src.numel()];
                for r in 0..rows {
                    d[r * src_last + start..r * src_last + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::PadLast { a } => {
                let src = &self.nodes[*a].value;
                let src_last = *src.shape().last().unwrap();
                let out_last = *node.value.shape().last().unwrap();
                let rows = gd.len() / out_last;
                let mut d = vec![0.0; src.numel()];
                for r in 0..rows {
                    let grow = &gd[r * out_last..(r + 1) * out_last];
                    d[r * src_last..(r + 1) * src_last].copy_from_slice(&grow[..src_last]);
                    d[(r + 1) * src_last - 1] += grow[src_last..].iter().sum::<f64>();
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum { a } => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::NormalizeSum { a, fallback } => {
                let x = self.nodes[*a].value.data();
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; x.len()];
                for (r, &fb) in fallback.iter().enumerate() {
                    if fb {
                        continue;
                    }
                    let span = r * width..(r + 1) * width;
                    let total: f64 = x[span.clone()].iter().sum();
                    let dot: f64 = gd[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                    for j in span {
                        d[j] = (gd[j] - dot) / total;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::WindowMix { weights, seq } => {
                let w = &self.nodes[*weights].value;
                let s = &self.nodes[*seq].value;
                let geo = ops::WindowGeometry::of(w.shape(), s.shape(), *node.value.shape().last().unwrap())
                    .expect("shapes validated in forward");
                let need_w = self.nodes[*weights].requires_grad;
                let need_s = self.nodes[*seq].requires_grad;
                let mut dw = vec![0.0; if need_w { w.numel() } else { 0 }];
                let mut ds = vec![0.0; if need_s { s.numel() } else { 0 }];
                for b in 0..geo.batch {
                    for p in 0..geo.channels {
                        let grow = &gd[(b * geo.channels + p) * geo.window..][..geo.window];
                        let soff = (b * geo.channels + p) * geo.len;
                        for i in 0..geo.count {
                            if need_w {
                                let srow = &s.data()[soff + i..soff + i + geo.window];
                                dw[b * geo.count + i] += grow.iter().zip(srow).map(|(g, x)| g * x).sum::<f64>();
                            }
                            if need_s {
                                let wv = w.data()[b * geo.count + i];
                                for (d, g) in ds[soff + i..soff + i + geo.window].iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            }
                        }
                    }
                }
                if need_w {
                    self.accumulate(grads, *weights, dw);
                }
                if need_s {
                    self.accumulate(grads, *seq, ds);
                }
            }
            Op::JointNorms { a } => {
                let x = &self.nodes[*a].value;
                let norms = node.value.data();
                let shape = x.shape();
                let t = shape[shape.len() - 1];
                let p = shape[shape.len() - 2];
                let joints = p / 3;
                let batch = x.numel() / (p * t);
                let mut d = vec![0.0; x.numel()];
                for b in 0..batch {
                    for j in 0..joints {
                        for f in 0..t {
                            let oi = (b * joints + j) * t + f;
                            let nrm = norms[oi];
                            if nrm == 0.0 {
                                continue;
                            }
                            for c in 0..3 {
                                let xi = (b * p + 3 * j + c) * t + f;
                                d[xi] = gd[oi] * x.data()[xi] / nrm;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

/// Sums a full-size gradient down to a broadcast scalar when needed.
fn reduce_to(g: &[f64], numel: usize) -> Vec<f64> {
    if numel == g.len() {
        g.to_vec()
    } else {
        debug_assert_eq!(numel, 1);
        vec![g.iter().sum()]
    }
}

/// `(outer, channels, inner)` view of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batch geometry for `[B?×m×k] · [B?×k×n]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatMulGeometry {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_stride: usize,
    pub b_stride: usize,
    pub batched: bool,
}

impl MatMulGeometry {
    pub(crate) fn of(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::dim("matmul", format!("cannot multiply shapes {a:?} and {b:?}"));
        let (ab, m, k) = match *a {
            [m, k] => (None, m, k),
            [bt, m, k] => (Some(bt), m, k),
            _ => return Err(mismatch()),
        };
        let (bb, k2, n) = match *b {
            [k, n] => (None, k, n),
            [bt, k, n] => (Some(bt), k, n),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let batch = match (ab, bb) {
            (Some(x), Some(y)) if x != y => return Err(mismatch()),
            (Some(x), _) | (None, Some(x)) => x,
            (None, None) => 1,
        };
        Ok(MatMulGeometry {
            batch,
            m,
            k,
            n,
            a_stride: if ab.is_some() { m * k } else { 0 },
            b_stride: if bb.is_some() { k * n } else { 0 },
            batched: ab.is_some() || bb.is_some(),
        })
    }
}

/// Gradients produced by one [`Tape::backward`] sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not influence it
    /// or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, or zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
