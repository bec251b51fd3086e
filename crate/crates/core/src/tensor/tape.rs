use super::{dims4, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Probability clamp applied inside the binary cross-entropy loss.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Forward-pass mode: training enables dropout, evaluation is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: NodeId,
        window: usize,
        stride: usize,
    },
    GlobalMaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mult: Vec<f64>,
    },
    BceLoss {
        probs: NodeId,
        labels: Vec<f64>,
    },
}

/// Define-by-run record of tensor operations, rebuilt per forward pass.
///
/// Ops append nodes; [`Tape::backward`] replays them in reverse, populating
/// an adjoint for every recorded tensor on a gradient path. Adjoints of
/// intermediate nodes stay readable afterwards, which is what the attention
/// maps need.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward target w.r.t. the given node, if one
    /// was accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn record(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by a tape op on finite inputs"
        );
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input tensor. Gradients are accumulated for it during
    /// backward only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.record(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "add: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.record(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "mul: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.record(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let v = self.value(input);
        let data = v.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.node(input).needs_grad;
        self.record(value, Op::Scale(input, factor), needs)
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.value(input).data().iter().sum();
        let needs = self.node(input).needs_grad;
        self.record(Tensor::scalar(total), Op::Sum(input), needs)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.node(input).needs_grad;
        self.record(value, Op::Relu(input), needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.node(input).needs_grad;
        self.record(value, Op::Sigmoid(input), needs)
    }

    /// Collapse everything after the batch axis: `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape();
        if shape.is_empty() {
            return Err(Error::Dimension("flatten: rank-0 tensor".into()));
        }
        let n = shape[0];
        let d = shape[1..].iter().product();
        self.reshape(input, vec![n, d])
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        let needs = self.node(input).needs_grad;
        Ok(self.record(value, Op::Reshape(input), needs))
    }

    /// Concatenate along `axis`; inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Parameter("concat: no inputs".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Parameter(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat: shape {s:?} incompatible with {first:?} on non-concat axes"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let needs = inputs.iter().any(|&id| self.node(id).needs_grad);
        Ok(self.record(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    // ---- layers ----

    /// Fully connected layer: `[N, D] x [D, M] + [M] -> [N, M]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vi, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        let (ishape, wshape) = (vi.shape(), vw.shape());
        if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[0] {
            return Err(Error::Dimension(format!(
                "dense: input {ishape:?} does not conform with weight {wshape:?}"
            )));
        }
        let (n, d, m) = (ishape[0], ishape[1], wshape[1]);
        if vb.shape() != [m] {
            return Err(Error::Dimension(format!(
                "dense: bias shape {:?} does not match output width {m}",
                vb.shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        for row in 0..n {
            let x = &vi.data()[row * d..(row + 1) * d];
            let o = &mut out[row * m..(row + 1) * m];
            o.copy_from_slice(vb.data());
            for (k, &xk) in x.iter().enumerate() {
                let wrow = &vw.data()[k * m..(k + 1) * m];
                for (oj, wj) in o.iter_mut().zip(wrow) {
                    *oj += xk * wj;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let needs = self.node(input).needs_grad
            || self.node(weight).needs_grad
            || self.node(bias).needs_grad;
        Ok(self.record(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    ///
    /// `input [N,C,H,W]`, `kernel [K,C,kh,kw]`, `bias [K]` giving
    /// `[N,K,H',W']` with `H' = (H + 2*padding - kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d: stride must be positive".into()));
        }
        let (vi, vk, vb) = (self.value(input), self.value(kernel), self.value(bias));
        let (n, c, h, w) = dims4(vi.shape(), "conv2d input")?;
        let (k_out, kc, kh, kw) = dims4(vk.shape(), "conv2d kernel")?;
        if c != kc {
            return Err(Error::Dimension(format!(
                "conv2d: input channels of {:?} do not match kernel channels of {:?}",
                vi.shape(),
                vk.shape()
            )));
        }
        if vb.shape() != [k_out] {
            return Err(Error::Dimension(format!(
                "conv2d: bias shape {:?} does not match {k_out} output channels",
                vb.shape()
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {:?} larger than padded input {:?} (padding {padding})",
                vk.shape(),
                vi.shape()
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;

        let mut out = vec![0.0; n * k_out * h_out * w_out];
        let inp = vi.data();
        let ker = vk.data();
        for bn in 0..n {
            for k in 0..k_out {
                let o_base = (bn * k_out + k) * h_out * w_out;
                let b = vb.data()[k];
                for v in &mut out[o_base..o_base + h_out * w_out] {
                    *v = b;
                }
                for ch in 0..c {
                    let i_base = (bn * c + ch) * h * w;
                    for ki in 0..kh {
                        let (oy_lo, oy_hi) = valid_range(h, ki, padding, stride, h_out);
                        for kj in 0..kw {
                            let (ox_lo, ox_hi) = valid_range(w, kj, padding, stride, w_out);
                            if oy_lo > oy_hi || ox_lo > ox_hi {
                                continue;
                            }
                            let wgt = ker[((k * c + ch) * kh + ki) * kw + kj];
                            for oy in oy_lo..=oy_hi {
                                let iy = oy * stride + ki - padding;
                                let ix0 = ox_lo * stride + kj - padding;
                                let orow = &mut out
                                    [o_base + oy * w_out + ox_lo..o_base + oy * w_out + ox_hi + 1];
                                let irow = &inp[i_base + iy * w + ix0..i_base + (iy + 1) * w];
                                for (o, i) in orow.iter_mut().zip(irow.iter().step_by(stride)) {
                                    *o += wgt * *i;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, k_out, h_out, w_out], out)?;
        let needs = self.node(input).needs_grad
            || self.node(kernel).needs_grad
            || self.node(bias).needs_grad;
        Ok(self.record(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Max pooling; gradients route to the first (row-major) maximum of each
    /// window.
    pub fn max_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (shape, h_out, w_out) = self.pool_dims(input, window, stride)?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let inp = self.value(input).data();
        let mut out = vec![0.0; n * c * h_out * w_out];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let i_base = nc * h * w;
            let o_base = nc * h_out * w_out;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = i_base + (oy * stride + dy) * w + ox * stride + dx;
                            if inp[idx] > best {
                                best = inp[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o_base + oy * w_out + ox] = best;
                    argmax[o_base + oy * w_out + ox] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h_out, w_out], out)?;
        let needs = self.node(input).needs_grad;
        Ok(self.record(value, Op::MaxPool2d { input, argmax }, needs))
    }

    /// Average pooling; gradients distribute uniformly over each window.
    pub fn avg_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (shape, h_out, w_out) = self.pool_dims(input, window, stride)?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let inp = self.value(input).data();
        let norm = 1.0 / (window * window) as f64;
        let mut out = vec![0.0; n * c * h_out * w_out];
        for nc in 0..n * c {
            let i_base = nc * h * w;
            let o_base = nc * h_out * w_out;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for dy in 0..window {
                        for dx in 0..window {
                            acc += inp[i_base + (oy * stride + dy) * w + ox * stride + dx];
                        }
                    }
                    out[o_base + oy * w_out + ox] = acc * norm;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h_out, w_out], out)?;
        let needs = self.node(input).needs_grad;
        Ok(self.record(
            value,
            Op::AvgPool2d {
                input,
                window,
                stride,
            },
            needs,
        ))
    }

    /// Max over all of H x W: `[N,C,H,W] -> [N,C]`.
    pub fn global_max_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.value(input).shape(), "global_max_pool input")?;
        let inp = self.value(input).data();
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for nc in 0..n * c {
            let base = nc * h * w;
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for (i, &v) in inp[base..base + h * w].iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = base + i;
                }
            }
            out[nc] = best;
            argmax[nc] = best_idx;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let needs = self.node(input).needs_grad;
        Ok(self.record(value, Op::GlobalMaxPool { input, argmax }, needs))
    }

    /// Mean over all of H x W: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.value(input).shape(), "global_avg_pool input")?;
        let inp = self.value(input).data();
        let norm = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for nc in 0..n * c {
            let base = nc * h * w;
            out[nc] = inp[base..base + h * w].iter().sum::<f64>() * norm;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let needs = self.node(input).needs_grad;
        Ok(self.record(value, Op::GlobalAvgPool { input }, needs))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; eval
    /// mode is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let v = self.value(input);
        let mult: Vec<f64> = (0..v.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = v.data().iter().zip(&mult).map(|(x, m)| x * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let needs = self.node(input).needs_grad;
        Ok(self.record(value, Op::Dropout { input, mult }, needs))
    }

    /// Mean binary cross-entropy over a batch of probabilities in (0,1),
    /// clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]`.
    pub fn bce_loss(&mut self, probs: NodeId, labels: &[u8]) -> Result<NodeId> {
        let v = self.value(probs);
        if v.numel() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension(format!(
                "bce_loss: {} probabilities vs {} labels",
                v.numel(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!(
                "bce_loss: label {bad} outside {{0, 1}}"
            )));
        }
        let labels: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let n = labels.len() as f64;
        let mut total = 0.0;
        for (&p, &y) in v.data().iter().zip(&labels) {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let needs = self.node(probs).needs_grad;
        Ok(self.record(
            Tensor::scalar(total / n),
            Op::BceLoss { probs, labels },
            needs,
        ))
    }

    fn pool_dims(
        &self,
        input: NodeId,
        window: usize,
        stride: usize,
    ) -> Result<(Vec<usize>, usize, usize)> {
        if window == 0 || stride == 0 {
            return Err(Error::Parameter(
                "pool window and stride must be positive".into(),
            ));
        }
        let shape = self.value(input).shape().to_vec();
        let (_, _, h, w) = dims4(&shape, "pool input")?;
        if window > h || window > w {
            return Err(Error::Dimension(format!(
                "pool window {window} larger than input spatial extent {h}x{w}"
            )));
        }
        Ok((shape, (h - window) / stride + 1, (w - window) / stride + 1))
    }

    // ---- reverse pass ----

    /// Populate gradients of every tensor on a gradient path from `loss`.
    ///
    /// `loss` must be scalar, and a tape can only run backward once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, shape is {:?}",
                self.value(loss).shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already run on this tape; rebuild the forward pass".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("checked above");
            self.propagate(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        if self.nodes[target.0].grad.is_none() {
            let shape = self.nodes[target.0].value.shape().to_vec();
            self.nodes[target.0].grad = Some(Tensor::zeros(shape));
        }
        update(
            self.nodes[target.0]
                .grad
                .as_mut()
                .expect("just initialized")
                .data_mut(),
        );
    }

    fn propagate(&mut self, i: usize, grad: &Tensor) {
        let g = grad.data();
        // Ops reference strictly earlier nodes, so borrowing values of inputs
        // while accumulating into their grads is done index-wise.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |dst| axpy(dst, g, 1.0));
                self.accumulate(b, |dst| axpy(dst, g, 1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let vb = self.value(b).data().to_vec();
                self.accumulate(a, |dst| {
                    for ((d, &gi), &bi) in dst.iter_mut().zip(g).zip(&vb) {
                        *d += gi * bi;
                    }
                });
                let va = self.value(a).data().to_vec();
                self.accumulate(b, |dst| {
                    for ((d, &gi), &ai) in dst.iter_mut().zip(g).zip(&va) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let (a, factor) = (*a, *factor);
                self.accumulate(a, |dst| axpy(dst, g, factor));
            }
            Op::Sum(a) => {
                let a = *a;
                let gs = g[0];
                self.accumulate(a, |dst| {
                    for d in dst {
                        *d += gs;
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let va = self.value(a).data().to_vec();
                self.accumulate(a, |dst| {
                    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(&va) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(a, |dst| {
                    for ((d, &gi), &yi) in dst.iter_mut().zip(g).zip(&y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accumulate(a, |dst| axpy(dst, g, 1.0));
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offset = 0;
                for id in inputs {
                    let block = self.value(id).shape()[axis] * inner;
                    self.accumulate(id, |dst| {
                        for o in 0..outer {
                            let src = &g[o * out_block + offset..o * out_block + offset + block];
                            axpy(&mut dst[o * block..(o + 1) * block], src, 1.0);
                        }
                    });
                    offset += block;
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let vi = self.value(input).data().to_vec();
                let vw = self.value(weight).data().to_vec();
                let ishape = self.value(input).shape().to_vec();
                let (n, d) = (ishape[0], ishape[1]);
                let m = self.value(weight).shape()[1];
                self.accumulate(input, |dst| {
                    for row in 0..n {
                        let grow = &g[row * m..(row + 1) * m];
                        let drow = &mut dst[row * d..(row + 1) * d];
                        for (k, dk) in drow.iter_mut().enumerate() {
                            let wrow = &vw[k * m..(k + 1) * m];
                            *dk += grow.iter().zip(wrow).map(|(gi, wi)| gi * wi).sum::<f64>();
                        }
                    }
                });
                self.accumulate(weight, |dst| {
                    for row in 0..n {
                        let grow = &g[row * m..(row + 1) * m];
                        let xrow = &vi[row * d..(row + 1) * d];
                        for (k, &xk) in xrow.iter().enumerate() {
                            axpy(&mut dst[k * m..(k + 1) * m], grow, xk);
                        }
                    }
                });
                self.accumulate(bias, |dst| {
                    for row in 0..n {
                        axpy(dst, &g[row * m..(row + 1) * m], 1.0);
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let (stride, padding) = (*stride, *padding);
                let ishape = self.value(input).shape().to_vec();
                let kshape = self.value(kernel).shape().to_vec();
                let oshape = self.nodes[i].value.shape().to_vec();
                let vi = self.value(input).data().to_vec();
                let vk = self.value(kernel).data().to_vec();
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (k_out, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                let (h_out, w_out) = (oshape[2], oshape[3]);

                self.accumulate(bias, |dst| {
                    for bn in 0..n {
                        for k in 0..k_out {
                            let base = (bn * k_out + k) * h_out * w_out;
                            dst[k] += g[base..base + h_out * w_out].iter().sum::<f64>();
                        }
                    }
                });
                self.accumulate(kernel, |dst| {
                    conv2d_kernel_grad(
                        dst, g, &vi, n, c, h, w, k_out, kh, kw, h_out, w_out, stride, padding,
                    );
                });
                self.accumulate(input, |dst| {
                    conv2d_input_grad(
                        dst, g, &vk, n, c, h, w, k_out, kh, kw, h_out, w_out, stride, padding,
                    );
                });
            }
            Op::MaxPool2d { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                self.accumulate(input, |dst| {
                    for (out_idx, &src_idx) in argmax.iter().enumerate() {
                        dst[src_idx] += g[out_idx];
                    }
                });
            }
            Op::AvgPool2d {
                input,
                window,
                stride,
            } => {
                let input = *input;
                let (window, stride) = (*window, *stride);
                let ishape = self.value(input).shape().to_vec();
                let oshape = self.nodes[i].value.shape().to_vec();
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (h_out, w_out) = (oshape[2], oshape[3]);
                let norm = 1.0 / (window * window) as f64;
                self.accumulate(input, |dst| {
                    for nc in 0..n * c {
                        let i_base = nc * h * w;
                        let o_base = nc * h_out * w_out;
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let gv = g[o_base + oy * w_out + ox] * norm;
                                for dy in 0..window {
                                    for dx in 0..window {
                                        dst[i_base
                                            + (oy * stride + dy) * w
                                            + ox * stride
                                            + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool { input } => {
                let input = *input;
                let ishape = self.value(input).shape().to_vec();
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let norm = 1.0 / (h * w) as f64;
                self.accumulate(input, |dst| {
                    for nc in 0..n * c {
                        let gv = g[nc] * norm;
                        for d in &mut dst[nc * h * w..(nc + 1) * h * w] {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Dropout { input, mult } => {
                let input = *input;
                let mult = mult.clone();
                self.accumulate(input, |dst| {
                    for ((d, &gi), &mi) in dst.iter_mut().zip(g).zip(&mult) {
                        *d += gi * mi;
                    }
                });
            }
            Op::BceLoss { probs, labels } => {
                let probs = *probs;
                let labels = labels.clone();
                let p = self.value(probs).data().to_vec();
                let gs = g[0];
                let n = labels.len() as f64;
                self.accumulate(probs, |dst| {
                    for ((d, &pi), &yi) in dst.iter_mut().zip(&p).zip(&labels) {
                        // Clamp acts as identity inside the bounds and
                        // saturates (zero gradient) outside.
                        if (BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&pi) {
                            *d += gs * (-yi / pi + (1.0 - yi) / (1.0 - pi)) / n;
                        }
                    }
                });
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Output positions `o` for which `o*stride + k - padding` lands inside
/// `0..extent`, as an inclusive range (lo > hi when empty).
fn valid_range(
    extent: usize,
    k: usize,
    padding: usize,
    stride: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if extent + padding > k {
        ((extent - 1 + padding - k) / stride).min(out_extent.saturating_sub(1))
    } else {
        return (1, 0);
    };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_kernel_grad(
    dst: &mut [f64],
    g: &[f64],
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
) {
    for bn in 0..n {
        for k in 0..k_out {
            let o_base = (bn * k_out + k) * h_out * w_out;
            for ch in 0..c {
                let i_base = (bn * c + ch) * h * w;
                for ki in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(h, ki, padding, stride, h_out);
                    for kj in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(w, kj, padding, stride, w_out);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ki - padding;
                            let ix0 = ox_lo * stride + kj - padding;
                            let grow =
                                &g[o_base + oy * w_out + ox_lo..o_base + oy * w_out + ox_hi + 1];
                            let irow = &input[i_base + iy * w + ix0..i_base + (iy + 1) * w];
                            acc += grow
                                .iter()
                                .zip(irow.iter().step_by(stride))
                                .map(|(gv, iv)| gv * iv)
                                .sum::<f64>();
                        }
                        dst[((k * c + ch) * kh + ki) * kw + kj] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_input_grad(
    dst: &mut [f64],
    g: &[f64],
    kernel: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
) {
    for bn in 0..n {
        for k in 0..k_out {
            let o_base = (bn * k_out + k) * h_out * w_out;
            for ch in 0..c {
                let i_base = (bn * c + ch) * h * w;
                for ki in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(h, ki, padding, stride, h_out);
                    for kj in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(w, kj, padding, stride, w_out);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        let wgt = kernel[((k * c + ch) * kh + ki) * kw + kj];
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ki - padding;
                            let ix0 = ox_lo * stride + kj - padding;
                            let grow =
                                &g[o_base + oy * w_out + ox_lo..o_base + oy * w_out + ox_hi + 1];
                            let drow = &mut dst[i_base + iy * w + ix0..i_base + (iy + 1) * w];
                            for (d, gv) in drow.iter_mut().step_by(stride).zip(grow) {
                                *d += wgt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
