//! Define-by-run reverse-mode autodiff over f32 tensors.
//!
//! A [`ComputationTape`] records every operation as it executes. Nodes are
//! appended in execution order, so walking the tape backwards from the loss
//! visits each node exactly once and accumulates gradients in a fixed order;
//! two identical forward passes replay into bit-identical gradients.
//!
//! Results never depend on thread count: a tape is confined to one thread,
//! and parallel callers run independent tapes.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise a + b, equal shapes.
    Add { a: usize, b: usize },
    /// Elementwise a * b, equal shapes.
    Mul { a: usize, b: usize },
    /// factor * x, elementwise.
    Scale { x: usize, factor: f32 },
    /// (x + shift) / denom, elementwise. Carrier for the noise and overlay
    /// stages of the input transform; gradient is g / denom.
    ShiftDiv { x: usize, denom: f32 },
    /// x where the mask is false, a constant fill elsewhere. Masked positions
    /// block the gradient entirely.
    MaskedFill { x: usize, mask: Vec<bool> },
    Relu { x: usize },
    Conv2d { input: usize, kernel: usize, bias: usize, stride: usize, padding: usize },
    MaxPool2d { x: usize, argmax: Vec<u32> },
    Dense { input: usize, weight: usize, bias: usize },
    Reshape { x: usize },
    /// Sum of all elements, scalar output.
    Sum { x: usize, value: f64 },
    /// Mean negative log-likelihood of per-row labels, scalar output.
    SoftmaxCrossEntropy { logits: usize, softmax: Vec<f32>, labels: Vec<u32>, value: f64 },
    /// Mean negative log of the summed probability of one row group of `k`
    /// consecutive classes (a base class under a composite labelling).
    MarginalNll { logits: usize, softmax: Vec<f32>, base_labels: Vec<u32>, k: usize, group_mass: Vec<f32>, value: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

#[derive(Default)]
pub struct ComputationTape {
    nodes: Vec<Node>,
}

fn ensure_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Adds `contrib` into an optional gradient buffer, allocating zeros on first
/// touch.
fn add_into(slot: &mut Option<Vec<f32>>, contrib: &[f32]) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.len(), contrib.len());
            for (dst, src) in g.iter_mut().zip(contrib) {
                *dst += src;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

impl ComputationTape {
    pub fn new() -> Self {
        ComputationTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and saved intermediates.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records an input tensor. The data is copied onto the tape.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    /// Records an input tensor from raw parts.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a reduction node at accumulator precision. Falls back
    /// to the stored f32 for other nodes. Finite-difference checks read this
    /// so numeric quotients are not dominated by f32 quantization of the loss.
    pub fn value_f64(&self, id: TensorId) -> f64 {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Sum { value, .. }
            | Op::SoftmaxCrossEntropy { value, .. }
            | Op::MarginalNll { value, .. } => *value,
            _ => node.data[0] as f64,
        }
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a node out of the tape as a plain tensor.
    pub fn detach(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        let mut t = Tensor::zeros(node.shape.clone());
        t.data_mut().copy_from_slice(&node.data);
        t
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { shape, data, requires_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                detail: format!("{:?} vs {:?} (no implicit broadcasting)", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        ensure_finite(&data, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                detail: format!("{:?} vs {:?} (no implicit broadcasting)", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        ensure_finite(&data, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: TensorId, factor: f32) -> Result<TensorId> {
        let data: Vec<f32> = self.data(x).iter().map(|v| v * factor).collect();
        ensure_finite(&data, "scale")?;
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Scale { x: x.0, factor }))
    }

    /// `(x + shift) / denom` elementwise. `shift` must match x's length and
    /// `denom` must be positive.
    pub fn shift_div(&mut self, x: TensorId, shift: &[f32], denom: f32) -> Result<TensorId> {
        if shift.len() != self.data(x).len() {
            return Err(Error::Dimension {
                op: "shift_div",
                detail: format!("shift length {} vs input {}", shift.len(), self.data(x).len()),
            });
        }
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::Config(format!("shift_div denominator must be positive, got {denom}")));
        }
        let data: Vec<f32> =
            self.data(x).iter().zip(shift).map(|(v, s)| (v + s) / denom).collect();
        ensure_finite(&data, "shift_div")?;
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::ShiftDiv { x: x.0, denom }))
    }

    /// Replaces masked elements with the paired fill value.
    pub fn masked_fill(&mut self, x: TensorId, mask: Vec<bool>, fill: &[f32]) -> Result<TensorId> {
        let n = self.data(x).len();
        if mask.len() != n || fill.len() != n {
            return Err(Error::Dimension {
                op: "masked_fill",
                detail: format!("mask {} / fill {} vs input {n}", mask.len(), fill.len()),
            });
        }
        let data: Vec<f32> = self
            .data(x)
            .iter()
            .zip(mask.iter().zip(fill))
            .map(|(&v, (&m, &f))| if m { f } else { v })
            .collect();
        ensure_finite(&data, "masked_fill")?;
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::MaskedFill { x: x.0, mask }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data = kernels::relu_forward(self.data(x));
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Relu { x: x.0 }))
    }

    /// 2-D cross-correlation: input `[n,c,h,w]`, kernel `[f,c,kh,kw]`, bias
    /// `[f]`. Output spatial extent is `floor((in + 2*padding - k)/stride)+1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("input rank {} / kernel rank {}, both must be 4", ishape.len(), kshape.len()),
            });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("input channels (axis 1) = {c} but kernel expects {kc}"),
            });
        }
        if bshape != [f] {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("bias shape {bshape:?} but kernel has {f} filters"),
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be nonzero".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let oh = kernels::conv_out_extent(h, kh, stride, padding);
        let ow = kernels::conv_out_extent(w, kw, stride, padding);
        let data = kernels::conv2d_forward(
            self.data(input),
            (n, c, h, w),
            self.data(kernel),
            (f, kh, kw),
            self.data(bias),
            stride,
            padding,
        );
        ensure_finite(&data, "conv2d")?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            vec![n, f, oh, ow],
            data,
            rg,
            Op::Conv2d { input: input.0, kernel: kernel.0, bias: bias.0, stride, padding },
        ))
    }

    /// Non-overlapping max pooling with square window. Spatial dims must be
    /// divisible by the window.
    pub fn maxpool2d(&mut self, x: TensorId, window: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension {
                op: "maxpool2d",
                detail: format!("input rank {} must be 4", shape.len()),
            });
        }
        if window == 0 {
            return Err(Error::Config("maxpool2d window must be nonzero".into()));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % window != 0 || w % window != 0 {
            return Err(Error::Dimension {
                op: "maxpool2d",
                detail: format!("spatial dims {h}x{w} not divisible by window {window}"),
            });
        }
        let (data, argmax) = kernels::maxpool_forward(self.data(x), (n, c, h, w), window);
        let rg = self.rg(x);
        Ok(self.push(
            vec![n, c, h / window, w / window],
            data,
            rg,
            Op::MaxPool2d { x: x.0, argmax },
        ))
    }

    /// Affine layer: input `[n,d]`, weight `[m,d]`, bias `[m]`.
    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 {
            return Err(Error::Dimension {
                op: "dense",
                detail: format!("input rank {} / weight rank {}, both must be 2", ishape.len(), wshape.len()),
            });
        }
        let (n, d) = (ishape[0], ishape[1]);
        let (m, wd) = (wshape[0], wshape[1]);
        if wd != d {
            return Err(Error::Dimension {
                op: "dense",
                detail: format!("input features (axis 1) = {d} but weight expects {wd}"),
            });
        }
        if bshape != [m] {
            return Err(Error::Dimension {
                op: "dense",
                detail: format!("bias shape {bshape:?} but weight has {m} rows"),
            });
        }
        let data = kernels::dense_forward(self.data(input), n, d, self.data(weight), m, self.data(bias));
        ensure_finite(&data, "dense")?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(vec![n, m], data, rg, Op::Dense { input: input.0, weight: weight.0, bias: bias.0 }))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                detail: format!("cannot view {:?} as {new_shape:?}", self.shape(x)),
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(new_shape, data, rg, Op::Reshape { x: x.0 }))
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = 0.0f64;
        for &v in self.data(x) {
            acc += v as f64;
        }
        let data = vec![acc as f32];
        ensure_finite(&data, "sum")?;
        let rg = self.rg(x);
        Ok(self.push(vec![1], data, rg, Op::Sum { x: x.0, value: acc }))
    }

    /// Mean cross-entropy of row softmax against integer labels; scalar
    /// output. Labels index the class axis of `[n,l]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[u32]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                detail: format!("logits rank {} must be 2", shape.len()),
            });
        }
        let (n, l) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        for (row, &lab) in labels.iter().enumerate() {
            if lab as usize >= l {
                return Err(Error::Label(format!("label {lab} out of range 0..{l} at row {row}")));
            }
        }
        let ldata = self.data(logits);
        let (softmax, lse) = kernels::softmax_rows(ldata, n, l);
        let mut acc = 0.0f64;
        for (row, &lab) in labels.iter().enumerate() {
            acc += lse[row] - ldata[row * l + lab as usize] as f64;
        }
        let value = acc / n as f64;
        let data = vec![value as f32];
        ensure_finite(&data, "softmax_cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            data,
            rg,
            Op::SoftmaxCrossEntropy { logits: logits.0, softmax, labels: labels.to_vec(), value },
        ))
    }

    /// Mean negative log of the total softmax mass of each row's base-class
    /// group. Class axis length must be `n_base * k`; group of base class `c`
    /// is the `k` consecutive classes starting at `c * k`.
    pub fn marginal_nll(&mut self, logits: TensorId, base_labels: &[u32], k: usize) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "marginal_nll",
                detail: format!("logits rank {} must be 2", shape.len()),
            });
        }
        let (n, l) = (shape[0], shape[1]);
        if k == 0 || l % k != 0 {
            return Err(Error::Config(format!("class axis {l} is not a multiple of group size {k}")));
        }
        if base_labels.len() != n {
            return Err(Error::Dimension {
                op: "marginal_nll",
                detail: format!("{} labels for {n} rows", base_labels.len()),
            });
        }
        let n_base = l / k;
        for (row, &lab) in base_labels.iter().enumerate() {
            if lab as usize >= n_base {
                return Err(Error::Label(format!("base label {lab} out of range 0..{n_base} at row {row}")));
            }
        }
        let ldata = self.data(logits);
        let (softmax, lse) = kernels::softmax_rows(ldata, n, l);
        let mut group_mass = vec![0.0f32; n];
        let mut acc = 0.0f64;
        for (row, &lab) in base_labels.iter().enumerate() {
            let start = row * l + lab as usize * k;
            // f64 mass for the loss value, f32-visible mass for the gradient.
            let mut p64 = 0.0f64;
            let mut p32acc = 0.0f64;
            for j in 0..k {
                p64 += (ldata[start + j] as f64 - lse[row]).exp();
                p32acc += softmax[start + j] as f64;
            }
            group_mass[row] = p32acc as f32;
            acc += -p64.ln();
        }
        let value = acc / n as f64;
        let data = vec![value as f32];
        ensure_finite(&data, "marginal_nll")?;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            data,
            rg,
            Op::MarginalNll {
                logits: logits.0,
                softmax,
                base_labels: base_labels.to_vec(),
                k,
                group_mass,
                value,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Walks the tape once in reverse,
    /// accumulating gradients additively into every `requires_grad` node that
    /// contributed to the loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract(
                "backward on a loss with no requires_grad inputs".into(),
            ));
        }
        add_into(&mut self.nodes[loss.0].grad, &[1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = node.grad.as_deref().expect("grad present by check above");
            match &node.op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    if head[*a].requires_grad {
                        add_into(&mut head[*a].grad, g);
                    }
                    if head[*b].requires_grad {
                        add_into(&mut head[*b].grad, g);
                    }
                }
                Op::Mul { a, b } => {
                    if head[*a].requires_grad {
                        let contrib: Vec<f32> =
                            g.iter().zip(&head[*b].data).map(|(gi, bi)| gi * bi).collect();
                        add_into(&mut head[*a].grad, &contrib);
                    }
                    if head[*b].requires_grad {
                        let contrib: Vec<f32> =
                            g.iter().zip(&head[*a].data).map(|(gi, ai)| gi * ai).collect();
                        add_into(&mut head[*b].grad, &contrib);
                    }
                }
                Op::Scale { x, factor } => {
                    if head[*x].requires_grad {
                        let contrib: Vec<f32> = g.iter().map(|gi| gi * factor).collect();
                        add_into(&mut head[*x].grad, &contrib);
                    }
                }
                Op::ShiftDiv { x, denom } => {
                    if head[*x].requires_grad {
                        let contrib: Vec<f32> = g.iter().map(|gi| gi / denom).collect();
                        add_into(&mut head[*x].grad, &contrib);
                    }
                }
                Op::MaskedFill { x, mask } => {
                    if head[*x].requires_grad {
                        let contrib: Vec<f32> = g
                            .iter()
                            .zip(mask)
                            .map(|(gi, &m)| if m { 0.0 } else { *gi })
                            .collect();
                        add_into(&mut head[*x].grad, &contrib);
                    }
                }
                Op::Relu { x } => {
                    if head[*x].requires_grad {
                        let contrib = kernels::relu_dinput(&head[*x].data, g);
                        add_into(&mut head[*x].grad, &contrib);
                    }
                }
                Op::Conv2d { input, kernel, bias, stride, padding } => {
                    let ishape = &head[*input].shape;
                    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let kshape = &head[*kernel].shape;
                    let (f, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                    let (oh, ow) = (node.shape[2], node.shape[3]);
                    if head[*input].requires_grad {
                        let contrib = kernels::conv2d_dinput(
                            g,
                            (n, c, h, w),
                            &head[*kernel].data,
                            (f, kh, kw),
                            *stride,
                            *padding,
                        );
                        add_into(&mut head[*input].grad, &contrib);
                    }
                    if head[*kernel].requires_grad {
                        let contrib = kernels::conv2d_dkernel(
                            g,
                            &head[*input].data,
                            (n, c, h, w),
                            (f, kh, kw),
                            *stride,
                            *padding,
                        );
                        add_into(&mut head[*kernel].grad, &contrib);
                    }
                    if head[*bias].requires_grad {
                        let contrib = kernels::conv2d_dbias(g, (n, f, oh, ow));
                        add_into(&mut head[*bias].grad, &contrib);
                    }
                }
                Op::MaxPool2d { x, argmax, .. } => {
                    if head[*x].requires_grad {
                        let contrib = kernels::maxpool_dinput(g, argmax, head[*x].data.len());
                        add_into(&mut head[*x].grad, &contrib);
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let (n, d) = (head[*input].shape[0], head[*input].shape[1]);
                    let m = head[*weight].shape[0];
                    if head[*input].requires_grad {
                        let contrib = kernels::dense_dinput(g, &head[*weight].data, n, d, m);
                        add_into(&mut head[*input].grad, &contrib);
                    }
                    if head[*weight].requires_grad {
                        let contrib = kernels::dense_dweight(g, &head[*input].data, n, d, m);
                        add_into(&mut head[*weight].grad, &contrib);
                    }
                    if head[*bias].requires_grad {
                        let contrib = kernels::dense_dbias(g, n, m);
                        add_into(&mut head[*bias].grad, &contrib);
                    }
                }
                Op::Reshape { x } => {
                    if head[*x].requires_grad {
                        add_into(&mut head[*x].grad, g);
                    }
                }
                Op::Sum { x, .. } => {
                    if head[*x].requires_grad {
                        let contrib = vec![g[0]; head[*x].data.len()];
                        add_into(&mut head[*x].grad, &contrib);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, softmax, labels, .. } => {
                    if head[*logits].requires_grad {
                        let (n, l) = (head[*logits].shape[0], head[*logits].shape[1]);
                        let up = g[0];
                        let nf = n as f32;
                        let mut contrib = vec![0.0f32; n * l];
                        for row in 0..n {
                            let lab = labels[row] as usize;
                            for j in 0..l {
                                let ind = if j == lab { 1.0 } else { 0.0 };
                                contrib[row * l + j] = up * (softmax[row * l + j] - ind) / nf;
                            }
                        }
                        add_into(&mut head[*logits].grad, &contrib);
                    }
                }
                Op::MarginalNll { logits, softmax, base_labels, k, group_mass, .. } => {
                    if head[*logits].requires_grad {
                        let (n, l) = (head[*logits].shape[0], head[*logits].shape[1]);
                        let up = g[0];
                        let nf = n as f32;
                        let mut contrib = vec![0.0f32; n * l];
                        for row in 0..n {
                            let start = base_labels[row] as usize * k;
                            let p = group_mass[row];
                            for j in 0..l {
                                let s = softmax[row * l + j];
                                let ind = if j >= start && j < start + k { s / p } else { 0.0 };
                                contrib[row * l + j] = up * (s - ind) / nf;
                            }
                        }
                        add_into(&mut head[*logits].grad, &contrib);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_known_values_no_padding() {
        // 1x1x3x3 input, single 2x2 filter of ones, bias 0.5: each output is
        // the window sum plus bias.
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let k = tape.leaf(&t(&[1, 1, 2, 2], &[1., 1., 1., 1.]), false);
        let b = tape.leaf(&t(&[1], &[0.5]), false);
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.data(y), &[12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn conv2d_padding_preserves_extent() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let k = tape.leaf(&Tensor::full(vec![2, 1, 3, 3], 1.0), false);
        let b = tape.leaf(&Tensor::zeros(vec![2]), false);
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 3, 3]);
        // Center tap sees all nine ones; corners see four.
        assert_eq!(tape.data(y)[4], 9.0);
        assert_eq!(tape.data(y)[0], 4.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 3, 4, 4]), false);
        let k = tape.leaf(&Tensor::zeros(vec![2, 4, 3, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![2]), false);
        let err = tape.conv2d(x, k, b, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn maxpool_takes_window_max_and_first_tie() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[7., 7., 3., 1.]), true);
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.data(y), &[7.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // Tie between the two 7s routes to the first in row-major order.
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_indivisible_extent() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 5, 4]), false);
        let err = tape.maxpool2d(x, 2).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "maxpool2d", .. }), "{err}");
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_known_values() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]), false);
        let w = tape.leaf(&t(&[3, 2], &[1., 0., 0., 1., 1., 1.]), false);
        let b = tape.leaf(&t(&[3], &[0.0, 10.0, -1.0]), false);
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, 12.0, 2.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 4]).with_grad(), true);
        let loss = tape.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((tape.data(loss)[0] - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_survives_extreme_logits() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[1, 4], &[1e6, 0.0, 0.0, 0.0]), true);
        let loss = tape.softmax_cross_entropy(x, &[0]).unwrap();
        let v = tape.data(loss)[0];
        assert!(v.is_finite());
        assert!(v.abs() < 1e-3, "loss {v}");
    }

    #[test]
    fn softmax_cross_entropy_rejects_out_of_range_label() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 4]), false);
        let err = tape.softmax_cross_entropy(x, &[1, 4]).unwrap_err();
        assert!(matches!(err, Error::Label(_)), "{err}");
    }

    #[test]
    fn marginal_nll_with_unit_group_matches_cross_entropy_gradient() {
        let logits = t(&[2, 3], &[0.2, -1.0, 0.7, 1.5, 0.3, -0.2]);
        let labels = [2u32, 0u32];

        let mut a = ComputationTape::new();
        let xa = tape_leaf_grad(&mut a, &logits);
        let la = a.softmax_cross_entropy(xa, &labels).unwrap();
        a.backward(la).unwrap();

        let mut b = ComputationTape::new();
        let xb = tape_leaf_grad(&mut b, &logits);
        let lb = b.marginal_nll(xb, &labels, 1).unwrap();
        b.backward(lb).unwrap();

        assert_eq!(a.grad(xa).unwrap(), b.grad(xb).unwrap());
    }

    fn tape_leaf_grad(tape: &mut ComputationTape, t: &Tensor) -> TensorId {
        tape.leaf(t, true)
    }

    #[test]
    fn marginal_nll_sums_group_mass() {
        // Uniform logits over 6 classes with k=3: group mass 1/2, loss ln 2.
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 6]), true);
        let loss = tape.marginal_nll(x, &[1], 3).unwrap();
        assert!((tape.data(loss)[0] - 2.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape = ComputationTape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![3, 2]), false);
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "add", .. }), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]).with_grad(), true);
        let y = tape.relu(x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn shared_use_accumulates_additively() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[2], &[3.0, -1.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_of_losses_is_sum_of_gradients() {
        let point = t(&[4], &[0.3, -0.8, 1.2, 0.05]);

        let grad_of = |build_second: bool| -> Vec<f32> {
            let mut tape = ComputationTape::new();
            let x = tape.leaf(&point, true);
            let r = tape.relu(x).unwrap();
            let l1 = tape.sum(r).unwrap();
            let m = tape.mul(x, x).unwrap();
            let l2 = tape.sum(m).unwrap();
            let loss = if build_second { tape.add(l1, l2).unwrap() } else { l1 };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };

        let combined = grad_of(true);
        let first = grad_of(false);
        let second = {
            let mut tape = ComputationTape::new();
            let x = tape.leaf(&point, true);
            let m = tape.mul(x, x).unwrap();
            let l2 = tape.sum(m).unwrap();
            tape.backward(l2).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        for i in 0..4 {
            assert!((combined[i] - (first[i] + second[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[3], &[0.1, 0.2, 0.3]), true);
        let y = tape.masked_fill(x, vec![false, true, false], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tape.data(y), &[0.1, 1.0, 0.3]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn shift_div_scales_gradient_by_inverse_denominator() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&t(&[2], &[0.4, 0.6]), true);
        let y = tape.shift_div(x, &[0.2, 0.2], 2.0).unwrap();
        assert_eq!(tape.data(y), &[0.3, 0.4]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn clear_releases_all_nodes() {
        let mut tape = ComputationTape::new();
        let x = tape.leaf(&Tensor::zeros(vec![8]), true);
        let _ = tape.relu(x).unwrap();
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn identical_forward_passes_are_bit_identical() {
        let x = t(&[1, 1, 4, 4], &(0..16).map(|i| (i as f32) * 0.13 - 0.9).collect::<Vec<_>>());
        let k = t(&[2, 1, 3, 3], &(0..18).map(|i| ((i * 7 % 5) as f32) * 0.21 - 0.4).collect::<Vec<_>>());
        let b = t(&[2], &[0.05, -0.02]);
        let run = || {
            let mut tape = ComputationTape::new();
            let xi = tape.leaf(&x, true);
            let ki = tape.leaf(&k, true);
            let bi = tape.leaf(&b, true);
            let c = tape.conv2d(xi, ki, bi, 1, 1).unwrap();
            let r = tape.relu(c).unwrap();
            let s = tape.sum(r).unwrap();
            tape.backward(s).unwrap();
            (tape.data(s).to_vec(), tape.grad(xi).unwrap().to_vec(), tape.grad(ki).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
