//! Dense f64 tensors and tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every differentiable operation as it executes; calling
//! [`Tape::backward`] on a scalar result replays the record in exact reverse
//! order and accumulates gradients into every tensor that asked for them.
//! Convolutions use the cross-correlation convention (no kernel flip) with
//! zero padding, and the transposed convolution is the exact adjoint of the
//! forward convolution.

use crate::error::{Error, Result};

/// Maximum tensor rank: vectors through batched image stacks.
pub const MAX_RANK: usize = 4;

/// Dense row-major tensor of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Request gradient accumulation for this tensor when used as a tape leaf.
    pub requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} values, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("filled: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// Marks the tensor as a gradient target (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gradient buffer populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Expects a `[channels, height, width]` image and returns those extents.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected [C, H, W] image, got {other:?}"
            ))),
        }
    }
}

/// Handle to a tensor stored on a tape.
pub type TensorId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    ConvTransposed2d {
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sub {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
    Sum {
        input: TensorId,
    },
    SumSquares {
        input: TensorId,
    },
    Crop {
        input: TensorId,
        out_h: usize,
        out_w: usize,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// True if any leaf below this node wants a gradient.
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
///
/// One training step owns one tape; tensors on the tape are immutable once
/// produced, so concurrent reads are safe.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// backward accumulates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Registers a trainable parameter (forces `requires_grad`).
    pub fn param(&mut self, tensor: Tensor) -> TensorId {
        self.leaf(tensor.with_grad())
    }

    /// Registers a fixed input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].tensor
    }

    /// Gradient of the last backward target w.r.t. tensor `id`.
    /// `None` means no gradient was requested or none has been computed;
    /// both read as zero.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad()
    }

    /// Drops all recorded gradients; values stay.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id].needs_grad
    }

    // ── Forward operations ──────────────────────────────────────────

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[C_in, H, W]`, `kernels` is `[C_out, C_in, kH, kW]` with
    /// odd kernel extents, `bias` is `[C_out]`. The output extent
    /// `(H + 2·padding − kH) / stride + 1` must divide exactly.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (ci, h, w) = self.value(input).chw()?;
        let kshape = self.value(kernels).shape().to_vec();
        let [co, kci, kh, kw] = four(&kshape)?;
        check_conv_common(stride, kh, kw, h, w, padding)?;
        if kci != ci {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {ci} channels, kernels expect {kci}"
            )));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias shape {:?}, want [{co}]",
                self.value(bias).shape()
            )));
        }
        let oh = conv_out_extent(h, kh, stride, padding)?;
        let ow = conv_out_extent(w, kw, stride, padding)?;

        let out = conv2d_gather(
            self.value(input).data(),
            (ci, h, w),
            self.value(kernels).data(),
            (co, ci, kh, kw),
            Some(self.value(bias).data()),
            stride,
            padding,
            (oh, ow),
        );
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        let t = Tensor::from_vec(&[co, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Adjoint of [`Tape::conv2d`] plus a bias: for matching parameters and
    /// zero bias, `⟨conv2d(u), v⟩ == ⟨u, conv2d_transposed(v)⟩`.
    ///
    /// `input` is `[C_in, H, W]`, `kernels` is `[C_in, C_out, kH, kW]`;
    /// output extent is `(H − 1)·stride − 2·padding + kH`.
    pub fn conv2d_transposed(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (ci, h, w) = self.value(input).chw()?;
        let kshape = self.value(kernels).shape().to_vec();
        let [kci, co, kh, kw] = four(&kshape)?;
        check_kernel_odd(stride, kh, kw)?;
        if kci != ci {
            return Err(Error::ShapeMismatch(format!(
                "conv2d_transposed: input has {ci} channels, kernels expect {kci}"
            )));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d_transposed: bias shape {:?}, want [{co}]",
                self.value(bias).shape()
            )));
        }
        let oh = convt_out_extent(h, kh, stride, padding)?;
        let ow = convt_out_extent(w, kw, stride, padding)?;

        let mut out = conv2d_scatter(
            self.value(input).data(),
            (ci, h, w),
            self.value(kernels).data(),
            (ci, co, kh, kw),
            stride,
            padding,
            (oh, ow),
        );
        let bias_data = self.value(bias).data();
        for (c, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let b = bias_data[c];
            for v in chunk {
                *v += b;
            }
        }
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        let t = Tensor::from_vec(&[co, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::ConvTransposed2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let src = self.value(input);
        let t = Tensor::from_vec(
            src.shape(),
            src.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("relu preserves shape");
        let needs = self.needs(input);
        self.push(t, Op::Relu { input }, needs)
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let t = self.zip(lhs, rhs, "add", |a, b| a + b)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(t, Op::Add { lhs, rhs }, needs))
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let t = self.zip(lhs, rhs, "sub", |a, b| a - b)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(t, Op::Sub { lhs, rhs }, needs))
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let t = self.zip(lhs, rhs, "mul", |a, b| a * b)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(t, Op::Mul { lhs, rhs }, needs))
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let src = self.value(input);
        let t = Tensor::from_vec(
            src.shape(),
            src.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("scale preserves shape");
        let needs = self.needs(input);
        self.push(t, Op::Scale { input, factor }, needs)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, needs)
    }

    /// Sum of squared elements, as a scalar tensor.
    pub fn sum_squares(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.value(input).data().iter().map(|&v| v * v).sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::SumSquares { input }, needs)
    }

    /// Keeps the top-left `out_h × out_w` window of every channel.
    pub fn crop(&mut self, input: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let (c, h, w) = self.value(input).chw()?;
        if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop to {out_h}x{out_w} from {h}x{w}"
            )));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                let row = ch * h * w + y * w;
                out.extend_from_slice(&src[row..row + out_w]);
            }
        }
        let needs = self.needs(input);
        let t = Tensor::from_vec(&[c, out_h, out_w], out)?;
        Ok(self.push(
            t,
            Op::Crop {
                input,
                out_h,
                out_w,
            },
            needs,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let diff = self.sub(pred, target)?;
        let ss = self.sum_squares(diff);
        let n = self.value(diff).numel() as f64;
        Ok(self.scale(ss, 1.0 / n))
    }

    fn zip(
        &self,
        lhs: TensorId,
        rhs: TensorId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Tensor::from_vec(
            a.shape(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populates gradient buffers of every `requires_grad` tensor with
    /// d `loss` / d tensor. Gradients accumulate additively across multiple
    /// uses of a tensor and across repeated backward calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.value(loss).numel()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match node.tensor.grad.as_mut() {
                        Some(existing) => {
                            for (e, g) in existing.iter_mut().zip(&grad) {
                                *e += g;
                            }
                        }
                        None => node.tensor.grad = Some(grad),
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    stride,
                    padding,
                } => {
                    let (ci, h, w) = self.nodes[input].tensor.chw().unwrap();
                    let kshape = self.nodes[kernels].tensor.shape().to_vec();
                    let [co, _, kh, kw] = four(&kshape).unwrap();
                    let (oh, ow) = {
                        let s = self.nodes[i].tensor.shape();
                        (s[1], s[2])
                    };
                    if self.needs(input) {
                        let d_in = conv2d_scatter(
                            &grad,
                            (co, oh, ow),
                            self.nodes[kernels].tensor.data(),
                            (co, ci, kh, kw),
                            stride,
                            padding,
                            (h, w),
                        );
                        add_into(&mut grads[input], &d_in);
                    }
                    if self.needs(kernels) {
                        let d_k = conv2d_kernel_grad(
                            &grad,
                            (co, oh, ow),
                            self.nodes[input].tensor.data(),
                            (ci, h, w),
                            (kh, kw),
                            stride,
                            padding,
                        );
                        add_into(&mut grads[kernels], &d_k);
                    }
                    if self.needs(bias) {
                        let d_b = channel_sums(&grad, co, oh * ow);
                        add_into(&mut grads[bias], &d_b);
                    }
                }
                Op::ConvTransposed2d {
                    input,
                    kernels,
                    bias,
                    stride,
                    padding,
                } => {
                    let (ci, h, w) = self.nodes[input].tensor.chw().unwrap();
                    let kshape = self.nodes[kernels].tensor.shape().to_vec();
                    let [_, co, kh, kw] = four(&kshape).unwrap();
                    let (oh, ow) = {
                        let s = self.nodes[i].tensor.shape();
                        (s[1], s[2])
                    };
                    if self.needs(input) {
                        // The adjoint of the adjoint is the forward gather.
                        let d_in = conv2d_gather(
                            &grad,
                            (co, oh, ow),
                            self.nodes[kernels].tensor.data(),
                            (ci, co, kh, kw),
                            None,
                            stride,
                            padding,
                            (h, w),
                        );
                        add_into(&mut grads[input], &d_in);
                    }
                    if self.needs(kernels) {
                        let d_k = conv2d_kernel_grad(
                            self.nodes[input].tensor.data(),
                            (ci, h, w),
                            &grad,
                            (co, oh, ow),
                            (kh, kw),
                            stride,
                            padding,
                        );
                        add_into(&mut grads[kernels], &d_k);
                    }
                    if self.needs(bias) {
                        let d_b = channel_sums(&grad, co, oh * ow);
                        add_into(&mut grads[bias], &d_b);
                    }
                }
                Op::Relu { input } => {
                    if self.needs(input) {
                        let src = self.nodes[input].tensor.data();
                        let d: Vec<f64> = grad
                            .iter()
                            .zip(src)
                            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                            .collect();
                        add_into(&mut grads[input], &d);
                    }
                }
                Op::Add { lhs, rhs } => {
                    if self.needs(lhs) {
                        add_into(&mut grads[lhs], &grad);
                    }
                    if self.needs(rhs) {
                        add_into(&mut grads[rhs], &grad);
                    }
                }
                Op::Sub { lhs, rhs } => {
                    if self.needs(lhs) {
                        add_into(&mut grads[lhs], &grad);
                    }
                    if self.needs(rhs) {
                        let neg: Vec<f64> = grad.iter().map(|&g| -g).collect();
                        add_into(&mut grads[rhs], &neg);
                    }
                }
                Op::Mul { lhs, rhs } => {
                    if self.needs(lhs) {
                        let d: Vec<f64> = grad
                            .iter()
                            .zip(self.nodes[rhs].tensor.data())
                            .map(|(&g, &b)| g * b)
                            .collect();
                        add_into(&mut grads[lhs], &d);
                    }
                    if self.needs(rhs) {
                        let d: Vec<f64> = grad
                            .iter()
                            .zip(self.nodes[lhs].tensor.data())
                            .map(|(&g, &a)| g * a)
                            .collect();
                        add_into(&mut grads[rhs], &d);
                    }
                }
                Op::Scale { input, factor } => {
                    if self.needs(input) {
                        let d: Vec<f64> = grad.iter().map(|&g| g * factor).collect();
                        add_into(&mut grads[input], &d);
                    }
                }
                Op::Sum { input } => {
                    if self.needs(input) {
                        let g = grad[0];
                        let d = vec![g; self.nodes[input].tensor.numel()];
                        add_into(&mut grads[input], &d);
                    }
                }
                Op::SumSquares { input } => {
                    if self.needs(input) {
                        let g = grad[0];
                        let d: Vec<f64> = self.nodes[input]
                            .tensor
                            .data()
                            .iter()
                            .map(|&x| 2.0 * x * g)
                            .collect();
                        add_into(&mut grads[input], &d);
                    }
                }
                Op::Crop {
                    input,
                    out_h,
                    out_w,
                } => {
                    if self.needs(input) {
                        let (c, h, w) = self.nodes[input].tensor.chw().unwrap();
                        let mut d = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for y in 0..out_h {
                                let src = (ch * out_h + y) * out_w;
                                let dst = ch * h * w + y * w;
                                d[dst..dst + out_w].copy_from_slice(&grad[src..src + out_w]);
                            }
                        }
                        add_into(&mut grads[input], &d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

fn channel_sums(data: &[f64], channels: usize, per_channel: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| data[c * per_channel..(c + 1) * per_channel].iter().sum())
        .collect()
}

fn four(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => Err(Error::ShapeMismatch(format!(
            "expected rank-4 kernel tensor, got {other:?}"
        ))),
    }
}

fn check_kernel_odd(stride: usize, kh: usize, kw: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::ShapeMismatch("stride must be positive".into()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    Ok(())
}

fn check_conv_common(
    stride: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    padding: usize,
) -> Result<()> {
    check_kernel_odd(stride, kh, kw)?;
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch(format!(
            "padded input {}x{} smaller than kernel {kh}x{kw}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(())
}

pub(crate) fn conv_out_extent(
    extent: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let span = extent + 2 * padding - k;
    if span % stride != 0 {
        return Err(Error::ShapeMismatch(format!(
            "output extent ({extent} + 2*{padding} - {k}) / {stride} is not integral"
        )));
    }
    Ok(span / stride + 1)
}

fn convt_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let grown = (extent - 1) * stride + k;
    if grown < 2 * padding + 1 {
        return Err(Error::ShapeMismatch(format!(
            "transposed output extent ({extent} - 1)*{stride} - 2*{padding} + {k} < 1"
        )));
    }
    Ok(grown - 2 * padding)
}

/// Valid `out` indices such that `out*stride + k_off - padding` lands inside
/// `[0, extent_src)`. Returns a half-open range.
fn valid_span(
    extent_src: usize,
    extent_out: usize,
    k_off: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo_num = padding as isize - k_off as isize;
    let lo = if lo_num <= 0 {
        0
    } else {
        (lo_num as usize).div_ceil(stride)
    };
    let hi_num = extent_src as isize - 1 + padding as isize - k_off as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(extent_out);
    (lo.min(hi), hi)
}

/// out[o, oy, ox] = bias[o] + Σ_{i,ky,kx} input[i, oy·s+ky−p, ox·s+kx−p] · K[o,i,ky,kx]
#[allow(clippy::too_many_arguments)]
fn conv2d_gather(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    kernels: &[f64],
    (co, kci, kh, kw): (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    debug_assert_eq!(kci, ci);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        let out_base = o * oh * ow;
        if let Some(b) = bias {
            out[out_base..out_base + oh * ow].fill(b[o]);
        }
        for i in 0..ci {
            let in_base = i * h * w;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_span(h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let wgt = kernels[((o * ci + i) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_span(w, ow, kx, stride, padding);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let span = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let y = oy * stride + ky - padding;
                        let row = in_base + y * w;
                        let x0 = row + (ox_lo * stride + kx - padding);
                        let dst = out_base + oy * ow + ox_lo;
                        if stride == 1 {
                            let src_row = &input[x0..x0 + span];
                            let dst_row = &mut out[dst..dst + span];
                            for (d, s) in dst_row.iter_mut().zip(src_row) {
                                *d += wgt * s;
                            }
                        } else {
                            let mut src = x0;
                            for ox in 0..span {
                                out[dst + ox] += wgt * input[src];
                                src += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// dst[d, oy·s+ky−p, ox·s+kx−p] += src[s, oy, ox] · K[s,d,ky,kx]
///
/// Shared by the transposed-convolution forward pass and the gradient of
/// `conv2d` with respect to its input.
fn conv2d_scatter(
    src: &[f64],
    (cs, sh, sw): (usize, usize, usize),
    kernels: &[f64],
    (kcs, cd, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    (dh, dw): (usize, usize),
) -> Vec<f64> {
    debug_assert_eq!(kcs, cs);
    let mut dst = vec![0.0; cd * dh * dw];
    for s in 0..cs {
        let src_base = s * sh * sw;
        for d in 0..cd {
            let dst_base = d * dh * dw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_span(dh, sh, ky, stride, padding);
                for kx in 0..kw {
                    let wgt = kernels[((s * cd + d) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_span(dw, sw, kx, stride, padding);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let span = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let y = oy * stride + ky - padding;
                        let row = dst_base + y * dw;
                        let t0 = row + (ox_lo * stride + kx - padding);
                        let s0 = src_base + oy * sw + ox_lo;
                        if stride == 1 {
                            let src_row = &src[s0..s0 + span];
                            let dst_row = &mut dst[t0..t0 + span];
                            for (d, s) in dst_row.iter_mut().zip(src_row) {
                                *d += wgt * s;
                            }
                        } else {
                            let mut tgt = t0;
                            for ox in 0..span {
                                dst[tgt] += wgt * src[s0 + ox];
                                tgt += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

/// dK[p, q, ky, kx] = Σ_{oy,ox} small[p, oy, ox] · big[q, oy·s+ky−p, ox·s+kx−p]
///
/// For `conv2d` weight gradients: small = output gradient, big = input.
/// For `conv2d_transposed` weight gradients: small = input, big = output
/// gradient.
fn conv2d_kernel_grad(
    small: &[f64],
    (cp, oh, ow): (usize, usize, usize),
    big: &[f64],
    (cq, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let mut dk = vec![0.0; cp * cq * kh * kw];
    for p in 0..cp {
        let small_base = p * oh * ow;
        for q in 0..cq {
            let big_base = q * h * w;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_span(h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_span(w, ow, kx, stride, padding);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let span = ox_hi - ox_lo;
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let y = oy * stride + ky - padding;
                        let s0 = small_base + oy * ow + ox_lo;
                        let b0 = big_base + y * w + (ox_lo * stride + kx - padding);
                        if stride == 1 {
                            let s_row = &small[s0..s0 + span];
                            let b_row = &big[b0..b0 + span];
                            acc += s_row.iter().zip(b_row).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            let mut src = b0;
                            for ox in 0..span {
                                acc += small[s0 + ox] * big[src];
                                src += stride;
                            }
                        }
                    }
                    dk[((p * cq + q) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    dk
}

/// Compares the analytic gradient of a scalar-valued tensor function against
/// central finite differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(op: F, input: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let loss = op(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .expect("param leaf receives a gradient")
        .to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let mut probe = input.clone();
        probe.requires_grad = false;
        probe.data_mut().copy_from_slice(&data);
        let id = t.leaf(probe);
        let l = op(&mut t, id)?;
        Ok(t.value(l).data()[0])
    };

    let mut max_err: f64 = 0.0;
    for i in 0..input.numel() {
        let mut plus = input.data().to_vec();
        plus[i] += epsilon;
        let mut minus = input.data().to_vec();
        minus[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Quadruple-loop reference convolution, written independently of the
    /// production gather/scatter kernels.
    fn conv2d_bruteforce(
        input: &Tensor,
        kernels: &Tensor,
        bias: &[f64],
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (ci, h, w) = input.chw().unwrap();
        let ks = kernels.shape();
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                let iv = input.data()[(i * h + y as usize) * w + x as usize];
                                let kv = kernels.data()[((o * ci + i) * kh + ky) * kw + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::from_vec(&[co, oh, ow], out).unwrap()
    }

    /// Adjoint-of-conv reference: scatters each input value through the
    /// kernel stamp.
    fn convt2d_bruteforce(
        input: &Tensor,
        kernels: &Tensor,
        bias: &[f64],
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (ci, h, w) = input.chw().unwrap();
        let ks = kernels.shape();
        let (co, kh, kw) = (ks[1], ks[2], ks[3]);
        let oh = (h - 1) * stride + kh - 2 * padding;
        let ow = (w - 1) * stride + kw - 2 * padding;
        let mut out = vec![0.0; co * oh * ow];
        for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(bias[o]);
        }
        for i in 0..ci {
            for oy in 0..h {
                for ox in 0..w {
                    let v = input.data()[(i * h + oy) * w + ox];
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                if y < 0 || x < 0 || y >= oh as isize || x >= ow as isize {
                                    continue;
                                }
                                out[(o * oh + y as usize) * ow + x as usize] +=
                                    v * kernels.data()[((i * co + o) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[co, oh, ow], out).unwrap()
    }

    fn run_conv(input: &Tensor, kernels: &Tensor, bias: &Tensor, s: usize, p: usize) -> Tensor {
        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let k = tape.leaf(kernels.clone());
        let b = tape.leaf(bias.clone());
        let out = tape.conv2d(i, k, b, s, p).unwrap();
        tape.value(out).clone()
    }

    fn run_convt(input: &Tensor, kernels: &Tensor, bias: &Tensor, s: usize, p: usize) -> Tensor {
        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let k = tape.leaf(kernels.clone());
        let b = tape.leaf(bias.clone());
        let out = tape.conv2d_transposed(i, k, b, s, p).unwrap();
        tape.value(out).clone()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "index {i}: {x} vs {y} (diff {})",
                (x - y).abs()
            );
        }
    }

    #[test]
    fn conv2d_ones_same_padding() {
        let input = Tensor::filled(&[1, 3, 3], 1.0);
        let kernels = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = run_conv(&input, &kernels, &bias, 1, 1);
        let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(out.data(), &expected);
        let oracle = conv2d_bruteforce(&input, &kernels, bias.data(), 1, 1);
        assert_eq!(out.data(), oracle.data());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[2, 5, 7]);
        let mut kernels = Tensor::zeros(&[2, 2, 1, 1]);
        kernels.data_mut()[0] = 1.0; // out0 <- in0
        kernels.data_mut()[3] = 1.0; // out1 <- in1
        let bias = Tensor::zeros(&[2]);
        let out = run_conv(&input, &kernels, &bias, 1, 0);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_shape_arithmetic() {
        let input = Tensor::zeros(&[1, 4, 4]);
        let kernels = Tensor::zeros(&[1, 1, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        let out = run_conv(&input, &kernels, &bias, 1, 0);
        assert_eq!(out.shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv2d_rejects_non_integral_extent() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::zeros(&[1, 6, 6]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let err = tape.conv2d(i, k, b, 2, 0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(tape.conv2d(i, k, b, 1, 0).is_err());
    }

    #[test]
    fn conv2d_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..20 {
            let ci = rng.random_range(1..4);
            let co = rng.random_range(1..4);
            let k = *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap();
            let padding = rng.random_range(0..2);
            let h = rng.random_range(k.max(3)..10);
            let w = rng.random_range(k.max(3)..10);
            let input = rand_tensor(&mut rng, &[ci, h, w]);
            let kernels = rand_tensor(&mut rng, &[co, ci, k, k]);
            let bias = rand_tensor(&mut rng, &[co]);
            let got = run_conv(&input, &kernels, &bias, 1, padding);
            let want = conv2d_bruteforce(&input, &kernels, bias.data(), 1, padding);
            assert_close(got.data(), want.data(), 1e-12);
            assert!(got.all_finite(), "case {case}");
        }
    }

    #[test]
    fn convt2d_ones_stamp() {
        let input = Tensor::filled(&[1, 2, 2], 1.0);
        let kernels = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = run_convt(&input, &kernels, &bias, 1, 0);
        assert_eq!(out.shape(), &[1, 4, 4]);
        let d = out.data();
        // corners touched by one stamp, the 2x2 center by all four
        for &corner in &[d[0], d[3], d[12], d[15]] {
            assert_eq!(corner, 1.0);
        }
        for &center in &[d[5], d[6], d[9], d[10]] {
            assert_eq!(center, 4.0);
        }
        let oracle = convt2d_bruteforce(&input, &kernels, bias.data(), 1, 0);
        assert_eq!(out.data(), oracle.data());
    }

    #[test]
    fn convt2d_scalar_case() {
        let input = Tensor::from_vec(&[1, 1, 1], vec![3.5]).unwrap();
        let kernels = Tensor::from_vec(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = run_convt(&input, &kernels, &bias, 1, 0);
        assert_eq!(out.data(), &[-7.0]);
    }

    #[test]
    fn convt2d_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ci = rng.random_range(1..4);
            let co = rng.random_range(1..4);
            let k = *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap();
            let padding = rng.random_range(0..(k / 2 + 1));
            let h = rng.random_range(2..8);
            let w = rng.random_range(2..8);
            let input = rand_tensor(&mut rng, &[ci, h, w]);
            let kernels = rand_tensor(&mut rng, &[ci, co, k, k]);
            let bias = rand_tensor(&mut rng, &[co]);
            let got = run_convt(&input, &kernels, &bias, 1, padding);
            let want = convt2d_bruteforce(&input, &kernels, bias.data(), 1, padding);
            assert_close(got.data(), want.data(), 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_on_random_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let u = rand_tensor(&mut rng, &[1, 5, 5]);
            let kernels = rand_tensor(&mut rng, &[2, 1, 3, 3]);
            let zero_out = Tensor::zeros(&[2]);
            let zero_in = Tensor::zeros(&[1]);
            let cu = run_conv(&u, &kernels, &zero_out, 1, 1);
            let v = rand_tensor(&mut rng, &[2, 5, 5]);
            let ctv = run_convt(&v, &kernels, &zero_in, 1, 1);
            let lhs = dot(cu.data(), v.data());
            let rhs = dot(u.data(), ctv.data());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv2d_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = rand_tensor(&mut rng, &[2, 6, 6]);
        let v = rand_tensor(&mut rng, &[2, 6, 6]);
        let kernels = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = Tensor::zeros(&[3]);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::from_vec(
            &[2, 6, 6],
            u.data()
                .iter()
                .zip(v.data())
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
        .unwrap();
        let lhs = run_conv(&mixed, &kernels, &bias, 1, 1);
        let cu = run_conv(&u, &kernels, &bias, 1, 1);
        let cv = run_conv(&v, &kernels, &bias, 1, 1);
        let rhs: Vec<f64> = cu
            .data()
            .iter()
            .zip(cv.data())
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        assert_close(lhs.data(), &rhs, 1e-10);
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let neg = tape.leaf(Tensor::from_vec(&[4], vec![-3.0, -0.5, -1e9, -1e-9]).unwrap());
        let z = tape.relu(neg);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_convention() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
        let same = tape.leaf(Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
        let zero = tape.mse_loss(a, same).unwrap();
        assert_eq!(tape.value(zero).data()[0], 0.0);

        let p = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let t = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let one = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.value(one).data()[0], 1.0);
    }

    #[test]
    fn mse_matches_two_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[1, 8, 8]);
        let b = rand_tensor(&mut rng, &[1, 8, 8]);
        let mut acc = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let d = a.data()[y * 8 + x] - b.data()[y * 8 + x];
                acc += d * d;
            }
        }
        let reference = acc / 64.0;
        let mut tape = Tape::new();
        let ia = tape.leaf(a);
        let ib = tape.leaf(b);
        let loss = tape.mse_loss(ia, ib).unwrap();
        assert!((tape.value(loss).data()[0] - reference).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 3, 4]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_chain_rule_by_hand() {
        // loss = mse(w*x, y) with w=2, x=3, y=5 → d/dw = 2*(6-5)*3 = 6
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.mse_loss(wx, y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(3))));
    }

    #[test]
    fn cleared_tape_reads_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let loss = tape.sum_squares(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        tape.clear_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 4, 4]);
        let err = grad_check(
            |tape, x| {
                let s = tape.scale(x, 3.0);
                Ok(tape.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn grad_check_conv_relu_mse_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[1, 6, 6]);
        let kernels = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let bias = rand_tensor(&mut rng, &[2]);
        let target = rand_tensor(&mut rng, &[2, 6, 6]);
        let err = grad_check(
            move |tape, x| {
                let k = tape.constant(kernels.clone());
                let b = tape.constant(bias.clone());
                let t = tape.constant(target.clone());
                let c = tape.conv2d(x, k, b, 1, 1)?;
                let r = tape.relu(c);
                tape.mse_loss(r, t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_conv2d_weights_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = rand_tensor(&mut rng, &[2, 5, 5]);
        let kernels = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[3]);

        let img = image.clone();
        let b = bias.clone();
        let err_k = grad_check(
            move |tape, k| {
                let i = tape.constant(img.clone());
                let bb = tape.constant(b.clone());
                let c = tape.conv2d(i, k, bb, 1, 1)?;
                Ok(tape.sum_squares(c))
            },
            &kernels,
            1e-5,
        )
        .unwrap();
        assert!(err_k < 1e-4, "kernel grad error {err_k}");

        let img = image.clone();
        let k = kernels.clone();
        let err_b = grad_check(
            move |tape, b| {
                let i = tape.constant(img.clone());
                let kk = tape.constant(k.clone());
                let c = tape.conv2d(i, kk, b, 1, 1)?;
                Ok(tape.sum_squares(c))
            },
            &bias,
            1e-5,
        )
        .unwrap();
        assert!(err_b < 1e-4, "bias grad error {err_b}");
    }

    #[test]
    fn grad_check_conv2d_transposed_all_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let image = rand_tensor(&mut rng, &[2, 4, 4]);
        let kernels = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let bias = rand_tensor(&mut rng, &[3]);

        let k = kernels.clone();
        let b = bias.clone();
        let err_in = grad_check(
            move |tape, x| {
                let kk = tape.constant(k.clone());
                let bb = tape.constant(b.clone());
                let c = tape.conv2d_transposed(x, kk, bb, 1, 1)?;
                Ok(tape.sum_squares(c))
            },
            &image,
            1e-5,
        )
        .unwrap();
        assert!(err_in < 1e-4, "input grad error {err_in}");

        let img = image.clone();
        let b = bias.clone();
        let err_k = grad_check(
            move |tape, k| {
                let i = tape.constant(img.clone());
                let bb = tape.constant(b.clone());
                let c = tape.conv2d_transposed(i, k, bb, 1, 1)?;
                Ok(tape.sum_squares(c))
            },
            &kernels,
            1e-5,
        )
        .unwrap();
        assert!(err_k < 1e-4, "kernel grad error {err_k}");
    }

    #[test]
    fn crop_forward_and_backward() {
        let mut tape = Tape::new();
        let x =
            tape.param(Tensor::from_vec(&[1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap());
        let c = tape.crop(x, 2, 2).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 1.0, 3.0, 4.0]);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(x).unwrap(),
            &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn ops_deterministic_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rand_tensor(&mut rng, &[2, 6, 6]);
        let kernels = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[2]);
        let a = run_conv(&input, &kernels, &bias, 1, 1);
        let b = run_conv(&input, &kernels, &bias, 1, 1);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.all_finite());
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::from_vec(&[], vec![]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
            // (ci, co, k, h, w, seed) with stride 1 and same padding
            (
                1usize..3,
                1usize..3,
                prop_oneof![Just(1usize), Just(3)],
                3usize..8,
                3usize..8,
            )
                .prop_flat_map(|(ci, co, k, h, w)| {
                    (Just(ci), Just(co), Just(k), Just(h), Just(w), any::<u64>())
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn adjointness_random_shapes((ci, co, k, h, w, seed) in conv_case()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let padding = k / 2;
                let u = rand_tensor(&mut rng, &[ci, h, w]);
                let kernels = rand_tensor(&mut rng, &[co, ci, k, k]);
                let cu = run_conv(&u, &kernels, &Tensor::zeros(&[co]), 1, padding);
                let v = rand_tensor(&mut rng, &[co, h, w]);
                let ctv = run_convt(&v, &kernels, &Tensor::zeros(&[ci]), 1, padding);
                let lhs = dot(cu.data(), v.data());
                let rhs = dot(u.data(), ctv.data());
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }

            #[test]
            fn conv_linear_in_input((ci, co, k, h, w, seed) in conv_case()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let padding = k / 2;
                let u = rand_tensor(&mut rng, &[ci, h, w]);
                let kernels = rand_tensor(&mut rng, &[co, ci, k, k]);
                let bias = Tensor::zeros(&[co]);
                let doubled = Tensor::from_vec(
                    &[ci, h, w],
                    u.data().iter().map(|&x| 2.0 * x).collect(),
                ).unwrap();
                let c1 = run_conv(&u, &kernels, &bias, 1, padding);
                let c2 = run_conv(&doubled, &kernels, &bias, 1, padding);
                for (a, b) in c1.data().iter().zip(c2.data()) {
                    prop_assert!((2.0 * a - b).abs() < 1e-10);
                }
            }
        }
    }
}
