//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the node
//! list is topologically sorted by construction. [`Tape::backward`] walks it
//! once in reverse. The only mode-dependent rule is the ReLU backward pass:
//! [`BackpropMode::GuidedRelu`] gates the upstream signal with
//! `1[R > 0] * 1[f > 0]`, everything else is ordinary reverse mode.
//!
//! Ops are coarse (whole convolutions, whole matrix products) and accept a
//! leading batch axis, which the trainer and the batched saliency paths use.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BackpropMode {
    #[default]
    Standard,
    GuidedRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Zero padding of `k / 2`; output spatial size equals the input's.
    Same,
    /// No padding; output shrinks by `k - 1` per axis.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Leaf,
    MatMul,
    BiasAdd,
    Conv2d,
    MaxPool2,
    Relu,
    Sum,
    SumPool,
    Mul,
    Softmax,
    Reshape,
    Pick,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        filter: NodeId,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sum(NodeId),
    SumPool(NodeId),
    Mul(NodeId, NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    Pick {
        input: NodeId,
        classes: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BiasAdd(..) => OpKind::BiasAdd,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Relu(_) => OpKind::Relu,
            Op::Sum(_) => OpKind::Sum,
            Op::SumPool(_) => OpKind::SumPool,
            Op::Mul(..) => OpKind::Mul,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Pick { .. } => OpKind::Pick,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::BiasAdd(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv2d { input, filter, .. } => vec![*input, *filter],
            Op::MaxPool2 { input, .. } | Op::Pick { input, .. } => vec![*input],
            Op::Relu(x) | Op::Sum(x) | Op::SumPool(x) | Op::Softmax(x) | Op::Reshape(x) => {
                vec![*x]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_len(&self) -> usize {
        self.col_rows() * self.out_h * self.out_w
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Leaves may borrow their tensors (model parameters) for the tape's
/// lifetime, so building a graph over a model copies no weights.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar seed with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: impl Into<Cow<'a, Tensor>>) -> NodeId {
        self.push(Op::Leaf, value.into(), true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: impl Into<Cow<'a, Tensor>>) -> NodeId {
        self.push(Op::Leaf, value.into(), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Input node ids of `id`, in operand order.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(op, Cow::Owned(value), needs_grad)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), Layout::Row, bv.data(), Layout::Row, &mut out, false);
        Ok(self.push_op(Op::MatMul(a, b), Tensor::from_parts(vec![n, m], out)))
    }

    /// Adds a per-channel bias along axis 1 of a `[n, c, ...]` tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() < 2 || bv.rank() != 1 || xv.shape()[1] != bv.len() {
            return Err(Error::shape(
                "bias_add",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let channels = bv.len();
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let b = bv.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push_op(Op::BiasAdd(x, bias), Tensor::from_parts(shape, out)))
    }

    /// Stride-1 2-D convolution (cross-correlation) of `[n, c_in, h, w]` with
    /// a square odd-sized filter bank `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, filter: NodeId, padding: Padding) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(filter));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, filter {ws:?}")));
        }
        let kernel = ws[2];
        let pad = match padding {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        };
        if xs[2] + 2 * pad < kernel || xs[3] + 2 * pad < kernel {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} smaller than {kernel}x{kernel} filter"),
            ));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            height: xs[2],
            width: xs[3],
            kernel,
            pad,
            out_h: xs[2] + 2 * pad - kernel + 1,
            out_w: xs[3] + 2 * pad - kernel + 1,
        };
        let col_len = geom.col_len();
        let plane = geom.out_h * geom.out_w;
        let in_len = geom.in_ch * geom.height * geom.width;
        let mut cols = vec![0.0; col_len * geom.batch];
        let mut out = vec![0.0; geom.batch * geom.out_ch * plane];
        for n in 0..geom.batch {
            let col = &mut cols[n * col_len..(n + 1) * col_len];
            im2col(&geom, &xv.data()[n * in_len..(n + 1) * in_len], col);
            gemm(
                geom.out_ch,
                geom.col_rows(),
                plane,
                wv.data(),
                Layout::Row,
                col,
                Layout::Row,
                &mut out[n * geom.out_ch * plane..(n + 1) * geom.out_ch * plane],
                false,
            );
        }
        let shape = vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        Ok(self.push_op(
            Op::Conv2d {
                input: x,
                filter,
                geom,
                cols,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// 2x2 max pooling with stride 2 over `[n, c, h, w]`; odd trailing
    /// rows/columns are dropped.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("maxpool2", format!("input {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = xv.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push_op(Op::MaxPool2 { input: x, argmax }, Tensor::from_parts(shape, out)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(Op::Relu(x), out)
    }

    /// Sum of every entry, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).sum();
        self.push_op(Op::Sum(x), Tensor::scalar(total))
    }

    /// Per-sample sum over all non-batch axes: `[n, ...] -> [n, 1]`.
    pub fn sum_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("sum_pool", format!("input {:?}", xv.shape())));
        }
        let n = xv.shape()[0];
        let inner = xv.len() / n;
        let out: Vec<f64> = xv.data().chunks(inner).map(|c| c.iter().sum()).collect();
        Ok(self.push_op(Op::SumPool(x), Tensor::from_parts(vec![n, 1], out)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(Op::Mul(a, b), out))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("tensors have rank >= 1");
        let mut out = xv.data().to_vec();
        out.chunks_mut(last).for_each(softmax_in_place);
        let shape = xv.shape().to_vec();
        self.push_op(Op::Softmax(x), Tensor::from_parts(shape, out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(Op::Reshape(x), out))
    }

    /// `Σ_b x[b, classes[b]]` over a `[n, c]` score matrix, as a scalar.
    ///
    /// With one row this is the selected logit; with many rows the gradient
    /// of the sum w.r.t. each row equals that row's own gradient, which is
    /// what batched saliency relies on.
    pub fn pick(&mut self, x: NodeId, classes: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || s[0] != classes.len() {
            return Err(Error::shape(
                "pick",
                format!("scores {s:?} with {} classes", classes.len()),
            ));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= s[1]) {
            return Err(Error::ClassOutOfRange {
                class: c,
                num_classes: s[1],
            });
        }
        let total = classes
            .iter()
            .enumerate()
            .map(|(b, &c)| xv.data()[b * s[1] + c])
            .sum();
        Ok(self.push_op(
            Op::Pick {
                input: x,
                classes: classes.to_vec(),
            },
            Tensor::scalar(total),
        ))
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xv = self.value(logits);
        let s = xv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= s[1]) {
            return Err(Error::ClassOutOfRange {
                class: c,
                num_classes: s[1],
            });
        }
        let mut probs = xv.data().to_vec();
        probs.chunks_mut(s[1]).for_each(softmax_in_place);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(b, &c)| -(probs[b * s[1] + c].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push_op(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse pass from a scalar seed node.
    pub fn backward(&self, seed: NodeId, mode: BackpropMode) -> Result<Gradients> {
        let seed_value = self.value(seed);
        if !seed_value.is_scalar() {
            return Err(Error::NonScalarSeed(seed_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::full(seed_value.shape(), 1.0));

        for id in (0..=seed.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, mode, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, mode: BackpropMode, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), Layout::Row, bv.data(), Layout::Transposed, &mut da, false);
                    accumulate(grads, *a, Tensor::from_parts(vec![n, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, av.data(), Layout::Transposed, g.data(), Layout::Row, &mut db, false);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::BiasAdd(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let channels = self.value(*bias).len();
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut db = vec![0.0; channels];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % channels] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, *bias, Tensor::from_parts(vec![channels], db));
                }
            }
            Op::Conv2d {
                input,
                filter,
                geom,
                cols,
            } => {
                let plane = geom.out_h * geom.out_w;
                let rows = geom.col_rows();
                let col_len = geom.col_len();
                let out_len = geom.out_ch * plane;
                if self.wants(*filter) {
                    let mut dw = vec![0.0; geom.out_ch * rows];
                    for n in 0..geom.batch {
                        gemm(
                            geom.out_ch,
                            plane,
                            rows,
                            &g.data()[n * out_len..(n + 1) * out_len],
                            Layout::Row,
                            &cols[n * col_len..(n + 1) * col_len],
                            Layout::Transposed,
                            &mut dw,
                            true,
                        );
                    }
                    let shape = self.value(*filter).shape().to_vec();
                    accumulate(grads, *filter, Tensor::from_parts(shape, dw));
                }
                if self.wants(*input) {
                    let wv = self.value(*filter);
                    let in_len = geom.in_ch * geom.height * geom.width;
                    let mut dx = vec![0.0; geom.batch * in_len];
                    let mut dcol = vec![0.0; col_len];
                    for n in 0..geom.batch {
                        gemm(
                            rows,
                            geom.out_ch,
                            plane,
                            wv.data(),
                            Layout::Transposed,
                            &g.data()[n * out_len..(n + 1) * out_len],
                            Layout::Row,
                            &mut dcol,
                            false,
                        );
                        col2im(geom, &dcol, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(grads, *input, Tensor::from_parts(shape, dx));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.wants(*input) {
                    let xv = self.value(*input);
                    let mut dx = vec![0.0; xv.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] += gv;
                    }
                    accumulate(grads, *input, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let pre = self.value(*x);
                    let dx: Vec<f64> = match mode {
                        // Subgradient 1 at exactly zero, matching a = 1[(w*x) >= 0].
                        BackpropMode::Standard => pre
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&p, &r)| if p >= 0.0 { r } else { 0.0 })
                            .collect(),
                        BackpropMode::GuidedRelu => pre
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&p, &r)| if r > 0.0 && p > 0.0 { r } else { 0.0 })
                            .collect(),
                    };
                    accumulate(grads, *x, Tensor::from_parts(pre.shape().to_vec(), dx));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
                }
            }
            Op::SumPool(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let inner = xv.len() / xv.shape()[0];
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv, inner))
                        .collect();
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = g.mul(self.value(*b)).expect("shapes checked at record time");
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.mul(self.value(*a)).expect("shapes checked at record time");
                    accumulate(grads, *b, db);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let last = *y.shape().last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for ((dxr, yr), gr) in dx
                        .chunks_mut(last)
                        .zip(y.data().chunks(last))
                        .zip(g.data().chunks(last))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
                }
            }
            Op::Pick { input, classes } => {
                if self.wants(*input) {
                    let xv = self.value(*input);
                    let c = xv.shape()[1];
                    let mut dx = vec![0.0; xv.len()];
                    for (b, &cls) in classes.iter().enumerate() {
                        dx[b * c + cls] += g.data()[0];
                    }
                    accumulate(grads, *input, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let xv = self.value(*logits);
                    let c = xv.shape()[1];
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (b, &l) in labels.iter().enumerate() {
                        dx[b * c + l] -= scale;
                    }
                    accumulate(grads, *logits, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[derive(Clone, Copy)]
enum Layout {
    Row,
    Transposed,
}

/// `c (+)= op(a) * op(b)` with `op(a): m x k`, `op(b): k x n`, all row-major
/// buffers. A transposed operand is stored as its untransposed row-major self.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], add: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::Row => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Row => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if add { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(geom: &ConvGeometry, image: &[f64], col: &mut [f64]) {
    let (k, pad) = (geom.kernel, geom.pad as isize);
    let plane = geom.out_h * geom.out_w;
    for c in 0..geom.in_ch {
        let src = &image[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..geom.out_h {
                    let ii = oi as isize + ki as isize - pad;
                    let out_row = &mut dst[oi * geom.out_w..(oi + 1) * geom.out_w];
                    if ii < 0 || ii >= geom.height as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src[ii as usize * geom.width..(ii as usize + 1) * geom.width];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = oj as isize + kj as isize - pad;
                        *v = if jj < 0 || jj >= geom.width as isize {
                            0.0
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(geom: &ConvGeometry, col: &[f64], image: &mut [f64]) {
    let (k, pad) = (geom.kernel, geom.pad as isize);
    let plane = geom.out_h * geom.out_w;
    for c in 0..geom.in_ch {
        let dst = &mut image[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..geom.out_h {
                    let ii = oi as isize + ki as isize - pad;
                    if ii < 0 || ii >= geom.height as isize {
                        continue;
                    }
                    for oj in 0..geom.out_w {
                        let jj = oj as isize + kj as isize - pad;
                        if jj >= 0 && jj < geom.width as isize {
                            dst[ii as usize * geom.width + jj as usize] += src[oi * geom.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. Used as the independent oracle for [`Tape::backward`].
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn valid_conv_of_ones_sums_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn same_conv_preserves_spatial_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 7, 6], 1.0));
        let w = tape.constant(Tensor::full(&[4, 3, 5, 5], 1.0));
        let y = tape.conv2d(x, w, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 7, 6]);
        // Corner sees a 3x3 patch of ones in each of 3 channels.
        assert_eq!(tape.value(y).at(&[0, 0, 0, 0]), 27.0);
        assert_eq!(tape.value(y).at(&[1, 3, 3, 3]), 75.0);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn shape_mismatch_reports_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 1]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 1]"), "{err}");
    }

    #[test]
    fn relu_identity_region_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.relu(x);
        let g = tape.backward(y, BackpropMode::Standard).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn guided_gate_blocks_negative_upstream() {
        // f(x) = -relu(x) at x = 2.
        let build = |tape: &mut Tape, x: NodeId| {
            let r = tape.relu(x);
            let neg = tape.constant(Tensor::scalar(-1.0));
            tape.mul(r, neg).unwrap()
        };
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = build(&mut tape, x);
        let std = tape.backward(y, BackpropMode::Standard).unwrap();
        let guided = tape.backward(y, BackpropMode::GuidedRelu).unwrap();
        assert_eq!(std.get(x).unwrap().data(), &[-1.0]);
        assert_eq!(guided.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn linear_gradient_is_weight() {
        let w = t(&[3, 1], &[0.5, -2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let x = tape.variable(random(&[1, 3], &mut rng));
            let wn = tape.constant(&w);
            let y = tape.matmul(x, wn).unwrap();
            let s = tape.sum(y);
            let g = tape.backward(s, BackpropMode::Standard).unwrap();
            assert_eq!(g.get(x).unwrap().data(), w.data());
        }
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x, BackpropMode::Standard),
            Err(Error::NonScalarSeed(_))
        ));
    }

    #[test]
    fn finite_difference_square_and_linear() {
        let g = finite_difference_gradient(|x| x.data()[0].powi(2), &Tensor::scalar(3.0), 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let w = [1.5, -0.25, 4.0];
        let f = |x: &Tensor| x.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = finite_difference_gradient(f, &t(&[3], &[0.3, 7.0, -2.0]), 1e-4).unwrap();
        for (a, b) in g.data().iter().zip(&w) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(finite_difference_gradient(f, &t(&[3], &[0.0; 3]), 0.0).is_err());
    }

    /// Gradient of a small conv/pool/dense/softmax graph w.r.t. input and
    /// every parameter, checked against central differences.
    #[test]
    fn mixed_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(&[2, 2, 6, 6], &mut rng);
        let w1 = random(&[3, 2, 3, 3], &mut rng);
        let b1 = random(&[3], &mut rng);
        let w2 = random(&[27, 4], &mut rng);
        let probe = random(&[2, 4], &mut rng);

        let eval = |x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, grads: bool| {
            let mut tape = Tape::new();
            let xn = tape.variable(x);
            let w1n = tape.variable(w1);
            let b1n = tape.variable(b1);
            let w2n = tape.variable(w2);
            let c = tape.conv2d(xn, w1n, Padding::Same).unwrap();
            let c = tape.bias_add(c, b1n).unwrap();
            let r = tape.relu(c);
            let p = tape.maxpool2(r).unwrap();
            let f = tape.reshape(p, &[2, 27]).unwrap();
            let l = tape.matmul(f, w2n).unwrap();
            let s = tape.softmax(l);
            let pr = tape.constant(&probe);
            let m = tape.mul(s, pr).unwrap();
            let out = tape.sum(m);
            let value = tape.value(out).data()[0];
            let g = grads.then(|| {
                let g = tape.backward(out, BackpropMode::Standard).unwrap();
                [xn, w1n, b1n, w2n].map(|id| g.get(id).unwrap().clone())
            });
            (value, g)
        };

        let (_, g) = eval(&x0, &w1, &b1, &w2, true);
        let g = g.unwrap();
        let checks = [
            finite_difference_gradient(|x| eval(x, &w1, &b1, &w2, false).0, &x0, 1e-6).unwrap(),
            finite_difference_gradient(|w| eval(&x0, w, &b1, &w2, false).0, &w1, 1e-6).unwrap(),
            finite_difference_gradient(|b| eval(&x0, &w1, b, &w2, false).0, &b1, 1e-6).unwrap(),
            finite_difference_gradient(|w| eval(&x0, &w1, &b1, w, false).0, &w2, 1e-6).unwrap(),
        ];
        for (analytic, numeric) in g.iter().zip(&checks) {
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(&[3, 4], &mut rng);
        let labels = [2, 0, 3];
        let loss = |x: &Tensor| {
            let mut tape = Tape::new();
            let n = tape.constant(x);
            let l = tape.cross_entropy(n, &labels).unwrap();
            tape.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let n = tape.variable(&logits);
        let l = tape.cross_entropy(n, &labels).unwrap();
        let g = tape.backward(l, BackpropMode::Standard).unwrap();
        let fd = finite_difference_gradient(loss, &logits, 1e-6).unwrap();
        for (a, b) in g.get(n).unwrap().data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 1, 8, 8], &mut rng);
        let w = random(&[2, 1, 5, 5], &mut rng);
        let mut tape = Tape::new();
        let xn = tape.variable(&x);
        let wn = tape.variable(&w);
        let c = tape.conv2d(xn, wn, Padding::Same).unwrap();
        let r = tape.relu(c);
        let s = tape.sum(r);
        let a = tape.backward(s, BackpropMode::GuidedRelu).unwrap();
        let b = tape.backward(s, BackpropMode::GuidedRelu).unwrap();
        assert_eq!(a.get(xn).unwrap(), b.get(xn).unwrap());
        assert_eq!(a.get(wn).unwrap(), b.get(wn).unwrap());
    }
}
