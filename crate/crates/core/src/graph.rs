//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation records a [`Node`] on a flat tape and computes its output
//! eagerly; [`Graph::backward`] then walks the tape once in reverse, summing
//! gradient contributions additively for nodes with multiple consumers. The
//! tape is confined to one thread; kernels themselves are deterministic, so
//! identical inputs reproduce outputs bit for bit.

use crate::conv;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Epsilon inside the batchnorm variance square root.
pub const BN_EPS: f64 = 1e-5;
/// Update weight for batchnorm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities entering the log in cross-entropy are clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;
/// Loss inputs must have per-pixel channel sums within this distance of 1.
pub const PROB_SUM_TOL: f64 = 1e-4;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics for one batchnorm site, owned by the caller so they
/// survive across graphs (one graph is built per batch).
#[derive(Debug, Clone)]
pub struct BnBuffer<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnBuffer<T> {
    pub fn new(channels: usize) -> Self {
        BnBuffer {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf { param: Option<ParamId> },
    /// inputs: [x, kernel, bias]
    Conv2d { dilation: (usize, usize) },
    /// inputs: [x]; saves the flat input index of each window maximum
    MaxPool2x2 { argmax: Vec<u32> },
    /// inputs: [x]; mean over each 2×2 window
    AvgPool2x2,
    /// inputs: [x]; nearest-neighbour 2x replication
    Upsample2x,
    /// inputs: the concatenated tensors; saves per-input channel counts
    Concat { channels: Vec<usize> },
    /// inputs: the summands (all same shape)
    AddN,
    /// inputs: [a, b]; elementwise product
    Mul,
    /// inputs: [x]
    Relu,
    /// inputs: [x]; saves nothing (backward reads the node output)
    SoftmaxChannels,
    /// inputs: [x, gamma, beta]; saves normalized activations and the
    /// per-channel scale actually used (batch inv-std in training mode,
    /// running inv-std in inference mode)
    BatchNorm {
        xhat: Vec<T>,
        scale: Vec<T>,
        training: bool,
    },
    /// inputs: [x]; scalar sum of all elements
    SumAll,
    /// inputs: [probs]; mean negative log-likelihood of the target class
    CrossEntropy { target: Vec<u8> },
    /// inputs: [probs]; 1 - soft Dice overlap of the foreground channel
    SoftDice { target: Vec<u8> },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2x2 { .. } => "maxpool2x2",
            Op::AvgPool2x2 => "avgpool2x2",
            Op::Upsample2x => "upsample2x",
            Op::Concat { .. } => "concat",
            Op::AddN => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::SoftmaxChannels => "softmax_channels",
            Op::BatchNorm { .. } => "batchnorm",
            Op::SumAll => "sum_all",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftDice { .. } => "soft_dice",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    out: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// The tape. Nodes are appended in execution order, which is also a valid
/// topological order, so the reverse sweep never sees a consumer before its
/// producers.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn output(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].out
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, out: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            out,
            grad: None,
        });
        id
    }

    /// Records a constant leaf (network input, target image, ...).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], value)
    }

    /// Records a leaf bound to a parameter; `accumulate_param_grads` later
    /// routes its gradient back into the [`ParamSet`].
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        self.push(
            Op::Leaf { param: Some(id) },
            vec![],
            params.value(id).clone(),
        )
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        dilation: (usize, usize),
    ) -> Result<NodeId> {
        let out = {
            let (xs, ks, bs) = (
                &self.nodes[x.0].out,
                &self.nodes[kernel.0].out,
                &self.nodes[bias.0].out,
            );
            conv::check_conv_shapes(xs, ks, bs, dilation)?;
            conv::conv2d_forward(xs, ks, bs, dilation)
        };
        Ok(self.push(Op::Conv2d { dilation }, vec![x, kernel, bias], out))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.nodes[x.0].out.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2x2 requires even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.nodes[x.0].out.data();
        let mut out = Tensor::zeros(vec![b, c, oh, ow]);
        let mut argmax = vec![0u32; b * c * oh * ow];
        {
            let dst = out.data_mut();
            let mut o = 0;
            for bc in 0..b * c {
                let plane = bc * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        // first occurrence in row-major scan wins ties
                        let mut best = plane + (2 * i) * w + 2 * j;
                        let mut val = src[best];
                        for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = plane + (2 * i + du) * w + 2 * j + dv;
                            if src[idx] > val {
                                val = src[idx];
                                best = idx;
                            }
                        }
                        dst[o] = val;
                        argmax[o] = best as u32;
                        o += 1;
                    }
                }
            }
        }
        Ok(self.push(Op::MaxPool2x2 { argmax }, vec![x], out))
    }

    pub fn avgpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.nodes[x.0].out.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avgpool2x2 requires even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.nodes[x.0].out.data();
        let quarter = T::from_f64(0.25);
        let mut out = Tensor::zeros(vec![b, c, oh, ow]);
        {
            let dst = out.data_mut();
            let mut o = 0;
            for bc in 0..b * c {
                let plane = bc * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let base = plane + (2 * i) * w + 2 * j;
                        dst[o] = (src[base] + src[base + 1] + src[base + w] + src[base + w + 1])
                            * quarter;
                        o += 1;
                    }
                }
            }
        }
        Ok(self.push(Op::AvgPool2x2, vec![x], out))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.nodes[x.0].out.dims4()?;
        let src = self.nodes[x.0].out.data();
        let mut out = Tensor::zeros(vec![b, c, 2 * h, 2 * w]);
        {
            let dst = out.data_mut();
            for bc in 0..b * c {
                for i in 0..h {
                    for j in 0..w {
                        let v = src[bc * h * w + i * w + j];
                        let base = bc * 4 * h * w + 2 * i * 2 * w + 2 * j;
                        dst[base] = v;
                        dst[base + 1] = v;
                        dst[base + 2 * w] = v;
                        dst[base + 2 * w + 1] = v;
                    }
                }
            }
        }
        Ok(self.push(Op::Upsample2x, vec![x], out))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat requires at least one input".into()));
        }
        let (b0, _, h0, w0) = self.nodes[xs[0].0].out.dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        let mut total = 0;
        for (i, &x) in xs.iter().enumerate() {
            let (b, c, h, w) = self.nodes[x.0].out.dims4()?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(Error::Shape(format!(
                    "concat input {i} has shape {:?}, expected batch/spatial {b0}x_x{h0}x{w0}",
                    self.nodes[x.0].out.shape()
                )));
            }
            channels.push(c);
            total += c;
        }
        let mut out = Tensor::zeros(vec![b0, total, h0, w0]);
        {
            let hw = h0 * w0;
            let dst = out.data_mut();
            let mut off = 0;
            for (&x, &c) in xs.iter().zip(&channels) {
                let src = self.nodes[x.0].out.data();
                for bi in 0..b0 {
                    let s = &src[bi * c * hw..(bi + 1) * c * hw];
                    let d = &mut dst[(bi * total + off) * hw..(bi * total + off + c) * hw];
                    d.copy_from_slice(s);
                }
                off += c;
            }
        }
        Ok(self.push(Op::Concat { channels }, xs.to_vec(), out))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("add requires at least one input".into()));
        }
        let shape = self.nodes[xs[0].0].out.shape().to_vec();
        for (i, &x) in xs.iter().enumerate() {
            if self.nodes[x.0].out.shape() != shape {
                return Err(Error::Shape(format!(
                    "add input {i} has shape {:?}, expected {shape:?}",
                    self.nodes[x.0].out.shape()
                )));
            }
        }
        let mut out = self.nodes[xs[0].0].out.clone();
        for &x in &xs[1..] {
            for (o, v) in out.data_mut().iter_mut().zip(self.nodes[x.0].out.data()) {
                *o = *o + *v;
            }
        }
        Ok(self.push(Op::AddN, xs.to_vec(), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].out.shape() != self.nodes[b.0].out.shape() {
            return Err(Error::Shape(format!(
                "mul operands disagree: {:?} vs {:?}",
                self.nodes[a.0].out.shape(),
                self.nodes[b.0].out.shape()
            )));
        }
        let mut out = self.nodes[a.0].out.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].out.data()) {
            *o = *o * *v;
        }
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].out.clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.push(Op::Relu, vec![x], out)
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.nodes[x.0].out.dims4()?;
        let hw = h * w;
        let src = self.nodes[x.0].out.data();
        let mut out = Tensor::zeros(vec![b, c, h, w]);
        {
            let dst = out.data_mut();
            for bi in 0..b {
                let base = bi * c * hw;
                for p in 0..hw {
                    let mut max = src[base + p];
                    for ci in 1..c {
                        let v = src[base + ci * hw + p];
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = T::zero();
                    for ci in 0..c {
                        let e = (src[base + ci * hw + p] - max).exp();
                        dst[base + ci * hw + p] = e;
                        sum = sum + e;
                    }
                    for ci in 0..c {
                        dst[base + ci * hw + p] = dst[base + ci * hw + p] / sum;
                    }
                }
            }
        }
        Ok(self.push(Op::SoftmaxChannels, vec![x], out))
    }

    /// Batch normalization over the channel axis.
    ///
    /// Training mode normalizes with biased batch statistics and folds them
    /// into `buf` (`running = (1-m)*running + m*batch`); inference mode
    /// normalizes with the running statistics and leaves `buf` untouched.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        buf: &mut BnBuffer<T>,
        training: bool,
    ) -> Result<NodeId> {
        let (b, c, h, w) = self.nodes[x.0].out.dims4()?;
        for (name, node) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[node.0].out.shape() != [c] {
                return Err(Error::Shape(format!(
                    "batchnorm {name} shape {:?} does not match {c} channels",
                    self.nodes[node.0].out.shape()
                )));
            }
        }
        if buf.running_mean.len() != c || buf.running_var.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm running stats sized for {} channels, input has {c}",
                buf.running_mean.len()
            )));
        }
        let hw = h * w;
        let m = T::from_f64((b * hw) as f64);
        let eps = T::from_f64(BN_EPS);
        let src = self.nodes[x.0].out.data();
        let ga = self.nodes[gamma.0].out.data();
        let be = self.nodes[beta.0].out.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut scale = vec![T::zero(); c];
        let mut out = Tensor::zeros(vec![b, c, h, w]);
        let dst = out.data_mut();
        for ci in 0..c {
            let (mean, var) = if training {
                let mut s = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        s = s + src[base + p];
                    }
                }
                let mean = s / m;
                let mut sq = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        let d = src[base + p] - mean;
                        sq = sq + d * d;
                    }
                }
                (mean, sq / m)
            } else {
                (buf.running_mean[ci], buf.running_var[ci])
            };
            let inv = T::one() / (var + eps).sqrt();
            scale[ci] = inv;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    let xh = (src[base + p] - mean) * inv;
                    xhat[base + p] = xh;
                    dst[base + p] = ga[ci] * xh + be[ci];
                }
            }
            if training {
                let mom = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - mom;
                buf.running_mean[ci] = keep * buf.running_mean[ci] + mom * mean;
                buf.running_var[ci] = keep * buf.running_var[ci] + mom * var;
            }
        }
        Ok(self.push(
            Op::BatchNorm {
                xhat,
                scale,
                training,
            },
            vec![x, gamma, beta],
            out,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.nodes[x.0].out.data().iter().copied().sum();
        self.push(Op::SumAll, vec![x], Tensor::new(vec![1], vec![s]).unwrap())
    }

    /// Mean over pixels of −log p[target class]. `pred` must already be a
    /// probability map (e.g. a softmax output); probabilities are clamped to
    /// `[1e-7, 1-1e-7]` inside the log.
    pub fn cross_entropy(&mut self, pred: NodeId, target: &[u8]) -> Result<NodeId> {
        let (b, c, h, w) = self.nodes[pred.0].out.dims4()?;
        self.check_loss_input(pred, target, b, c, h, w)?;
        let hw = h * w;
        let src = self.nodes[pred.0].out.data();
        let lo = T::from_f64(PROB_CLAMP);
        let hi = T::one() - lo;
        let mut acc = T::zero();
        for bi in 0..b {
            for p in 0..hw {
                let t = target[bi * hw + p] as usize;
                let mut v = src[(bi * c + t) * hw + p];
                if v < lo {
                    v = lo;
                } else if v > hi {
                    v = hi;
                }
                acc = acc - v.ln();
            }
        }
        let n = T::from_f64((b * hw) as f64);
        let out = Tensor::new(vec![1], vec![acc / n]).unwrap();
        Ok(self.push(
            Op::CrossEntropy {
                target: target.to_vec(),
            },
            vec![pred],
            out,
        ))
    }

    /// Soft Dice loss of the foreground channel: 1 − (2Σpg + s)/(Σp + Σg + s)
    /// with smoothing s = 1.
    pub fn soft_dice(&mut self, pred: NodeId, target: &[u8]) -> Result<NodeId> {
        let (b, c, h, w) = self.nodes[pred.0].out.dims4()?;
        if c != 2 {
            return Err(Error::Shape(format!(
                "soft_dice expects a 2-channel probability map, got {c} channels"
            )));
        }
        self.check_loss_input(pred, target, b, c, h, w)?;
        let (num, den) = self.dice_terms(pred, target, b, c, h, w);
        let loss = T::one() - num / den;
        let out = Tensor::new(vec![1], vec![loss]).unwrap();
        Ok(self.push(
            Op::SoftDice {
                target: target.to_vec(),
            },
            vec![pred],
            out,
        ))
    }

    /// Shared loss-input contract: target length/values and per-pixel channel
    /// sums. Non-finite sums are allowed through so that a diverged forward
    /// pass surfaces as a non-finite loss rather than a shape error.
    fn check_loss_input(
        &self,
        pred: NodeId,
        target: &[u8],
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<()> {
        let hw = h * w;
        if target.len() != b * hw {
            return Err(Error::Shape(format!(
                "target has {} entries, prediction {:?} implies {}",
                target.len(),
                self.nodes[pred.0].out.shape(),
                b * hw
            )));
        }
        if let Some(bad) = target.iter().position(|&t| (t as usize) >= c) {
            return Err(Error::Shape(format!(
                "target value {} at index {bad} exceeds the {c}-class prediction",
                target[bad]
            )));
        }
        let src = self.nodes[pred.0].out.data();
        let tol = T::from_f64(PROB_SUM_TOL);
        for bi in 0..b {
            for p in 0..hw {
                let mut s = T::zero();
                for ci in 0..c {
                    s = s + src[(bi * c + ci) * hw + p];
                }
                let dev = (s - T::one()).abs();
                if dev.is_finite() && dev > tol {
                    return Err(Error::Shape(format!(
                        "loss input is not a probability map: channel sum {s} at batch {bi}, pixel {p} deviates from 1 by more than {PROB_SUM_TOL}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// (2Σpg + s, Σp + Σg + s) over the foreground channel.
    fn dice_terms(
        &self,
        pred: NodeId,
        target: &[u8],
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> (T, T) {
        let hw = h * w;
        let src = self.nodes[pred.0].out.data();
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut gsum = T::zero();
        for bi in 0..b {
            let fg = (bi * c + 1) * hw;
            for p in 0..hw {
                let pv = src[fg + p];
                psum = psum + pv;
                if target[bi * hw + p] == 1 {
                    inter = inter + pv;
                    gsum = gsum + T::one();
                }
            }
        }
        let s = T::one();
        let two = T::from_f64(2.0);
        (two * inter + s, psum + gsum + s)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively into
    /// every node that (transitively) feeds the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].out.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].out.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(vec![1], T::one()));
        for id in (0..=loss.0).rev() {
            // Inputs always precede their consumer on the tape, so the split
            // gives simultaneous access to this node and its inputs' grads.
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let Some(g) = node.grad.take() else {
                continue;
            };
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Conv2d { dilation } => {
                    let x = node.inputs[0];
                    let k = node.inputs[1];
                    let bias = node.inputs[2];
                    let (dx, dk, db) = conv::conv2d_backward(
                        &before[x.0].out,
                        &before[k.0].out,
                        *dilation,
                        &g,
                    );
                    add_grad(before, x, |d| axpy(d, dx.data()));
                    add_grad(before, k, |d| axpy(d, dk.data()));
                    add_grad(before, bias, |d| axpy(d, db.data()));
                }
                Op::MaxPool2x2 { argmax } => {
                    let x = node.inputs[0];
                    let gd = g.data();
                    add_grad(before, x, |d| {
                        for (o, &src_idx) in argmax.iter().enumerate() {
                            d[src_idx as usize] = d[src_idx as usize] + gd[o];
                        }
                    });
                }
                Op::AvgPool2x2 => {
                    let x = node.inputs[0];
                    let (b, c, oh, ow) = node.out.dims4().expect("checked");
                    let (h, w) = (2 * oh, 2 * ow);
                    let quarter = T::from_f64(0.25);
                    let gd = g.data();
                    add_grad(before, x, |d| {
                        let mut o = 0;
                        for bc in 0..b * c {
                            let plane = bc * h * w;
                            for i in 0..oh {
                                for j in 0..ow {
                                    let share = gd[o] * quarter;
                                    let base = plane + (2 * i) * w + 2 * j;
                                    d[base] = d[base] + share;
                                    d[base + 1] = d[base + 1] + share;
                                    d[base + w] = d[base + w] + share;
                                    d[base + w + 1] = d[base + w + 1] + share;
                                    o += 1;
                                }
                            }
                        }
                    });
                }
                Op::Upsample2x => {
                    let x = node.inputs[0];
                    let (b, c, h2, w2) = node.out.dims4().expect("checked");
                    let (h, w) = (h2 / 2, w2 / 2);
                    let gd = g.data();
                    add_grad(before, x, |d| {
                        for bc in 0..b * c {
                            for i in 0..h {
                                for j in 0..w {
                                    let base = bc * h2 * w2 + 2 * i * w2 + 2 * j;
                                    let s = gd[base] + gd[base + 1] + gd[base + w2] + gd[base + w2 + 1];
                                    let di = bc * h * w + i * w + j;
                                    d[di] = d[di] + s;
                                }
                            }
                        }
                    });
                }
                Op::Concat { channels } => {
                    let (b, total, h, w) = node.out.dims4().expect("checked");
                    let hw = h * w;
                    let gd = g.data();
                    let mut off = 0;
                    let inputs = node.inputs.clone();
                    for (&x, &c) in inputs.iter().zip(channels) {
                        add_grad(before, x, |d| {
                            for bi in 0..b {
                                let src = &gd[(bi * total + off) * hw..(bi * total + off + c) * hw];
                                axpy(&mut d[bi * c * hw..(bi + 1) * c * hw], src);
                            }
                        });
                        off += c;
                    }
                }
                Op::AddN => {
                    let inputs = node.inputs.clone();
                    for x in inputs {
                        add_grad(before, x, |d| axpy(d, g.data()));
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let bv = before[b.0].out.data().to_vec();
                    add_grad(before, a, |d| {
                        for ((d, &g), &b) in d.iter_mut().zip(g.data()).zip(&bv) {
                            *d = *d + g * b;
                        }
                    });
                    let av = before[a.0].out.data().to_vec();
                    add_grad(before, b, |d| {
                        for ((d, &g), &a) in d.iter_mut().zip(g.data()).zip(&av) {
                            *d = *d + g * a;
                        }
                    });
                }
                Op::Relu => {
                    let x = node.inputs[0];
                    let gd = g.data();
                    let xv = &before[x.0].out;
                    let mask: Vec<bool> = xv.data().iter().map(|&v| v > T::zero()).collect();
                    add_grad(before, x, |d| {
                        for (i, (&g, &keep)) in gd.iter().zip(&mask).enumerate() {
                            if keep {
                                d[i] = d[i] + g;
                            }
                        }
                    });
                }
                Op::SoftmaxChannels => {
                    let x = node.inputs[0];
                    let (b, c, h, w) = node.out.dims4().expect("checked");
                    let hw = h * w;
                    let y = node.out.data();
                    let gd = g.data();
                    add_grad(before, x, |d| {
                        for bi in 0..b {
                            let base = bi * c * hw;
                            for p in 0..hw {
                                let mut dot = T::zero();
                                for ci in 0..c {
                                    let i = base + ci * hw + p;
                                    dot = dot + gd[i] * y[i];
                                }
                                for ci in 0..c {
                                    let i = base + ci * hw + p;
                                    d[i] = d[i] + y[i] * (gd[i] - dot);
                                }
                            }
                        }
                    });
                }
                Op::BatchNorm {
                    xhat,
                    scale,
                    training,
                } => {
                    let x = node.inputs[0];
                    let gamma = node.inputs[1];
                    let beta = node.inputs[2];
                    let (b, c, h, w) = node.out.dims4().expect("checked");
                    let hw = h * w;
                    let m = T::from_f64((b * hw) as f64);
                    let gd = g.data();
                    let gv = before[gamma.0].out.data().to_vec();
                    // per-channel reductions Σg and Σg·xhat
                    let mut s1 = vec![T::zero(); c];
                    let mut s2 = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                s1[ci] = s1[ci] + gd[base + p];
                                s2[ci] = s2[ci] + gd[base + p] * xhat[base + p];
                            }
                        }
                    }
                    let is_training = *training;
                    add_grad(before, x, |d| {
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                let k = gv[ci] * scale[ci];
                                for p in 0..hw {
                                    let i = base + p;
                                    let dx = if is_training {
                                        k * (gd[i] - s1[ci] / m - xhat[i] * s2[ci] / m)
                                    } else {
                                        k * gd[i]
                                    };
                                    d[i] = d[i] + dx;
                                }
                            }
                        }
                    });
                    add_grad(before, gamma, |d| axpy(d, &s2));
                    add_grad(before, beta, |d| axpy(d, &s1));
                }
                Op::SumAll => {
                    let x = node.inputs[0];
                    let gv = g.data()[0];
                    add_grad(before, x, |d| {
                        for v in d {
                            *v = *v + gv;
                        }
                    });
                }
                Op::CrossEntropy { target } => {
                    let pred = node.inputs[0];
                    let (b, c, h, w) = before[pred.0].out.dims4().expect("checked");
                    let hw = h * w;
                    let n = T::from_f64((b * hw) as f64);
                    let lo = T::from_f64(PROB_CLAMP);
                    let hi = T::one() - lo;
                    let g0 = g.data()[0];
                    let pv = before[pred.0].out.data().to_vec();
                    let tgt = target.clone();
                    add_grad(before, pred, |d| {
                        for bi in 0..b {
                            for p in 0..hw {
                                let t = tgt[bi * hw + p] as usize;
                                let i = (bi * c + t) * hw + p;
                                let v = pv[i];
                                // outside the clamp the loss term is constant
                                if v >= lo && v <= hi {
                                    d[i] = d[i] - g0 / (n * v);
                                }
                            }
                        }
                    });
                }
                Op::SoftDice { target } => {
                    let pred = node.inputs[0];
                    let (b, c, h, w) = before[pred.0].out.dims4().expect("checked");
                    let hw = h * w;
                    let tgt = target.clone();
                    // recompute the two Dice terms from the saved forward output
                    let src = before[pred.0].out.data();
                    let mut inter = T::zero();
                    let mut psum = T::zero();
                    let mut gsum = T::zero();
                    for bi in 0..b {
                        let fg = (bi * c + 1) * hw;
                        for p in 0..hw {
                            psum = psum + src[fg + p];
                            if tgt[bi * hw + p] == 1 {
                                inter = inter + src[fg + p];
                                gsum = gsum + T::one();
                            }
                        }
                    }
                    let s = T::one();
                    let two = T::from_f64(2.0);
                    let num = two * inter + s;
                    let den = psum + gsum + s;
                    let g0 = g.data()[0];
                    add_grad(before, pred, |d| {
                        for bi in 0..b {
                            let fg = (bi * c + 1) * hw;
                            for p in 0..hw {
                                let gt = if tgt[bi * hw + p] == 1 { two } else { T::zero() };
                                // d(1 - num/den)/dp = (num - gt*den) / den²
                                let dx = (num - gt * den) / (den * den);
                                d[fg + p] = d[fg + p] + g0 * dx;
                            }
                        }
                    });
                }
            }
            node.grad = Some(g);
        }
        Ok(())
    }

    /// Routes leaf gradients from the last backward pass into the parameter
    /// set's accumulators.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet<T>) {
        for node in &self.nodes {
            if let (Op::Leaf { param: Some(pid) }, Some(grad)) = (&node.op, &node.grad) {
                params.accumulate_grad(*pid, grad);
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lazily materializes the gradient slot of `id` and hands it to `f`.
fn add_grad<T: Scalar>(nodes: &mut [Node<T>], id: NodeId, f: impl FnOnce(&mut [T])) {
    let node = &mut nodes[id.0];
    let grad = node
        .grad
        .get_or_insert_with(|| Tensor::zeros(node.out.shape().to_vec()));
    f(grad.data_mut());
}

/// d += s, elementwise.
fn axpy<T: Scalar>(d: &mut [T], s: &[T]) {
    debug_assert_eq!(d.len(), s.len());
    for (d, &s) in d.iter_mut().zip(s) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t4(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![b, c, h, w], data).unwrap()
    }

    #[test]
    fn conv_identity_through_graph() {
        let mut g = Graph::new();
        let x = g.input(t4(1, 1, 3, 3, vec![1.0; 9]));
        let k = g.input(t4(1, 1, 1, 1, vec![1.0]));
        let b = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = g.conv2d(x, k, b, (1, 1)).unwrap();
        assert_eq!(g.output(y).data(), g.output(x).data());
    }

    #[test]
    fn maxpool_takes_window_maximum() {
        let mut g = Graph::new();
        let x = g.input(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.output(y).shape(), [1, 1, 1, 1]);
        assert_eq!(g.output(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_occurrence() {
        let mut g = Graph::new();
        let x = g.input(t4(1, 1, 2, 4, vec![5.0; 8]));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.output(y).data(), &[5.0, 5.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        // row-major first occurrence: top-left corner of each window
        assert_eq!(
            g.grad(x).unwrap().data(),
            &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(g.maxpool2x2(x).is_err());
    }

    #[test]
    fn upsample_replicates_and_backward_is_adjoint() {
        let mut g = Graph::new();
        let x = g.input(t4(1, 1, 1, 1, vec![7.0]));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.output(y).data(), &[7.0; 4]);

        // ⟨up(x), y⟩ == ⟨x, upᵀ(y)⟩ on random 4x4 data
        let mut s = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let xv = Tensor::from_fn(vec![2, 3, 4, 4], |_| next());
        let yv = Tensor::from_fn(vec![2, 3, 8, 8], |_| next());
        let mut g = Graph::new();
        let x = g.input(xv.clone());
        let up = g.upsample2x(x).unwrap();
        let yn = g.input(yv.clone());
        let prod = g.mul(up, yn).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        // loss = ⟨up(x), y⟩ and d loss/dx = upᵀ(y), so ⟨x, dx⟩ must equal loss
        let lhs = g.output(loss).data()[0];
        let rhs: f64 = g
            .grad(x)
            .unwrap()
            .data()
            .iter()
            .zip(xv.data())
            .map(|(a, b)| a * b)
            .sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn concat_preserves_input_order() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(vec![1, 2, 4, 4], 1.0f64));
        let b = g.input(Tensor::full(vec![1, 3, 4, 4], 2.0f64));
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.output(y).shape(), [1, 5, 4, 4]);
        let d = g.output(y).data();
        assert!(d[..32].iter().all(|&v| v == 1.0));
        assert!(d[32..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch_naming_index() {
        let mut g = Graph::new();
        let a = g.input(Tensor::<f32>::zeros(vec![1, 2, 4, 4]));
        let b = g.input(Tensor::<f32>::zeros(vec![1, 2, 8, 8]));
        let err = g.concat_channels(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("input 1"), "{err}");
    }

    #[test]
    fn concat_then_split_is_identity() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(vec![2, 2, 3, 3], |i| i as f64));
        let b = g.input(Tensor::from_fn(vec![2, 1, 3, 3], |i| 100.0 + i as f64));
        let y = g.concat_channels(&[a, b]).unwrap();
        // split = per-batch channel slices; verify against the originals
        let out = g.output(y);
        for bi in 0..2 {
            for ci in 0..3 {
                for p in 0..9 {
                    let v = out.data()[((bi * 3) + ci) * 9 + p];
                    let expect = if ci < 2 {
                        g.output(a).data()[(bi * 2 + ci) * 9 + p]
                    } else {
                        g.output(b).data()[bi * 9 + p]
                    };
                    assert_eq!(v, expect);
                }
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(vec![1, 2, 3, 3]));
        let y = g.softmax_channels(x).unwrap();
        assert!(g.output(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_sums_to_one_on_random_logits() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![2, 4, 5, 5], |i| {
            ((i * 2654435761) % 1000) as f64 / 100.0 - 5.0
        }));
        let y = g.softmax_channels(x).unwrap();
        let out = g.output(y);
        let hw = 25;
        for bi in 0..2 {
            for p in 0..hw {
                let s: f64 = (0..4).map(|c| out.data()[(bi * 4 + c) * hw + p]).sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-6);
                assert!((0..4).all(|c| out.data()[(bi * 4 + c) * hw + p] >= 0.0));
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![2, 3, 4, 4], |i| i as f64));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(vec![2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn diamond_graph_accumulates_both_branches() {
        // x feeds both relu(x) and x*x; gradients must add.
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 1, 2, 2], 3.0f64));
        let a = g.relu(x);
        let b = g.mul(x, x).unwrap();
        let s = g.add_n(&[a, b]).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        // d/dx (x + x²) = 1 + 2x = 7 at x = 3
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn cross_entropy_of_uniform_half_is_ln2() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 2, 4, 4], 0.5f64));
        let target = vec![0u8; 16];
        let l = g.cross_entropy(x, &target).unwrap();
        assert_relative_eq!(g.output(l).data()[0], std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_of_perfect_one_hot_is_clamped_near_zero() {
        let mut g = Graph::new();
        let mut probs = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        // all pixels class 1 with probability exactly 1
        for p in 0..4 {
            probs.data_mut()[4 + p] = 1.0;
        }
        let x = g.input(probs);
        let l = g.cross_entropy(x, &[1, 1, 1, 1]).unwrap();
        let expect = -(1.0 - PROB_CLAMP).ln();
        assert_relative_eq!(g.output(l).data()[0], expect, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_non_probability_input() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 2, 2, 2], 0.7f64));
        let err = g.cross_entropy(x, &[0; 4]).unwrap_err();
        assert!(err.to_string().contains("probability"), "{err}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 2, 2, 2], 0.5f64));
        assert!(g.cross_entropy(x, &[0, 1, 2, 0]).is_err());
    }

    #[test]
    fn soft_dice_of_perfect_prediction_is_zero() {
        // 10-voxel lesion in a 64x64 slice, exact one-hot prediction:
        // 1 - (2*10+1)/(10+10+1) = 0
        let mut g = Graph::new();
        let mut probs = Tensor::<f64>::zeros(vec![1, 2, 64, 64]);
        let mut target = vec![0u8; 64 * 64];
        for (i, t) in target.iter_mut().enumerate() {
            let fg = i < 10;
            if fg {
                *t = 1;
            }
            probs.data_mut()[if fg { 64 * 64 + i } else { i }] = 1.0;
        }
        let x = g.input(probs);
        let l = g.soft_dice(x, &target).unwrap();
        assert_eq!(g.output(l).data()[0], 0.0);
    }

    #[test]
    fn soft_dice_stays_in_unit_interval() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![1, 2, 4, 4], |i| {
            if i < 16 {
                0.3f64
            } else {
                0.7
            }
        }));
        let target = vec![0u8; 16];
        let l = g.soft_dice(x, &target).unwrap();
        let v = g.output(l).data()[0];
        assert!((0.0..=1.0).contains(&v), "{v}");
    }

    #[test]
    fn batchnorm_training_normalizes_and_updates_running_stats() {
        let mut g = Graph::new();
        let x = g.input(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let ga = g.input(Tensor::new(vec![1], vec![1.0]).unwrap());
        let be = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut buf = BnBuffer::new(1);
        let y = g.batchnorm(x, ga, be, &mut buf, true).unwrap();
        let out = g.output(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
        // biased variance of [1,2,3,4] = 1.25
        assert_relative_eq!(buf.running_mean[0], 0.1 * 2.5, epsilon = 1e-12);
        assert_relative_eq!(buf.running_var[0], 0.9 * 1.0 + 0.1 * 1.25, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut g = Graph::new();
        let x = g.input(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let ga = g.input(Tensor::new(vec![1], vec![1.0]).unwrap());
        let be = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut buf = BnBuffer::new(1);
        buf.running_mean[0] = 2.0;
        buf.running_var[0] = 4.0;
        let y = g.batchnorm(x, ga, be, &mut buf, false).unwrap();
        let inv = 1.0 / (4.0f64 + BN_EPS).sqrt();
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| (v - 2.0) * inv).collect();
        for (a, e) in g.output(y).data().iter().zip(&expect) {
            assert_relative_eq!(a, e, epsilon = 1e-12);
        }
        // inference must not touch the buffer
        assert_eq!(buf.running_mean[0], 2.0);
        assert_eq!(buf.running_var[0], 4.0);
    }

    #[test]
    fn avgpool_averages_each_window() {
        let mut g = Graph::new();
        let x = g.input(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.avgpool2x2(x).unwrap();
        assert_eq!(g.output(y).data(), &[2.5]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn forward_kernels_are_bitwise_deterministic() {
        let x = Tensor::from_fn(vec![2, 3, 8, 8], |i| ((i * 37) % 101) as f32 * 0.17 - 5.0);
        let k = Tensor::from_fn(vec![4, 3, 3, 3], |i| ((i * 53) % 97) as f32 * 0.11 - 4.0);
        let b = Tensor::from_fn(vec![4], |i| i as f32);
        let run = || {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let kn = g.input(k.clone());
            let bn = g.input(b.clone());
            let c = g.conv2d(xn, kn, bn, (1, 1)).unwrap();
            let p = g.maxpool2x2(c).unwrap();
            let s = g.softmax_channels(p).unwrap();
            g.output(s).data().to_vec()
        };
        let (a, b2) = (run(), run());
        assert!(a.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_forward_reaches_loss_as_non_finite_value() {
        // a poisoned weight must surface as a NaN loss, not a shape error,
        // so the trainer can report divergence with epoch/batch context
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 2, 2, 2], f64::NAN));
        let sm = g.softmax_channels(x).unwrap();
        let l = g.cross_entropy(sm, &[0; 4]).unwrap();
        assert!(g.output(l).data()[0].is_nan());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn conv_preserves_spatial_shape(
                b in 1..3usize, cin in 1..4usize, cout in 1..4usize,
                h in 1..8usize, w in 1..8usize, ki in 0..4usize, d in 1..3usize,
            ) {
                // square odd kernels plus the two asymmetric orientations
                let (kh, kw) = [(1, 1), (3, 3), (1, 3), (5, 1)][ki];
                let mut g = Graph::<f32>::new();
                let x = g.input(Tensor::zeros(vec![b, cin, h, w]));
                let k = g.input(Tensor::zeros(vec![cout, cin, kh, kw]));
                let bias = g.input(Tensor::zeros(vec![cout]));
                let y = g.conv2d(x, k, bias, (d, d)).unwrap();
                prop_assert_eq!(g.output(y).shape(), &[b, cout, h, w]);
            }

            #[test]
            fn pool_halves_and_upsample_doubles(
                b in 1..3usize, c in 1..4usize, h in 1..5usize, w in 1..5usize,
            ) {
                let mut g = Graph::<f32>::new();
                let x = g.input(Tensor::zeros(vec![b, c, 2 * h, 2 * w]));
                let p = g.maxpool2x2(x).unwrap();
                prop_assert_eq!(g.output(p).shape(), &[b, c, h, w]);
                let a = g.avgpool2x2(x).unwrap();
                prop_assert_eq!(g.output(a).shape(), &[b, c, h, w]);
                let u = g.upsample2x(x).unwrap();
                prop_assert_eq!(g.output(u).shape(), &[b, c, 4 * h, 4 * w]);
            }

            #[test]
            fn concat_is_associative_in_content(
                b in 1..3usize, h in 1..4usize, w in 1..4usize,
                c1 in 1..3usize, c2 in 1..3usize, c3 in 1..3usize,
            ) {
                let mk = |c: usize, salt: usize| {
                    Tensor::from_fn(vec![b, c, h, w], |i| (i + salt * 1000) as f32)
                };
                let (ta, tb, tc) = (mk(c1, 1), mk(c2, 2), mk(c3, 3));
                let mut g = Graph::<f32>::new();
                let (a, bb, c) = (g.input(ta.clone()), g.input(tb.clone()), g.input(tc.clone()));
                let left_in = g.concat_channels(&[a, bb]).unwrap();
                let left = g.concat_channels(&[left_in, c]).unwrap();
                let right_in = g.concat_channels(&[bb, c]).unwrap();
                let right = g.concat_channels(&[a, right_in]).unwrap();
                prop_assert_eq!(g.output(left).data(), g.output(right).data());
            }
        }
    }
}
