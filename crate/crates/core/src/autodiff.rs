//! Reverse-mode differentiation over image tensors.
//!
//! A `Graph` records a directed acyclic computation eagerly (values are
//! computed and cached at node creation) and replays it in reverse to
//! accumulate gradients. Only the node kinds needed by the pansharpening
//! network and its training loss exist; this is not a general autodiff.
//!
//! Everything runs single-threaded with fixed summation order, so forward
//! evaluation and gradients are bit-identical across runs.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Fused multiply-add where the target supports it, plain otherwise.
/// Every convolution path (including test oracles) must go through this so
/// results stay bit-comparable.
#[inline(always)]
pub fn fmla(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// Sum with eight independent accumulators so the loop vectorizes.
pub(crate) fn lane_sum(values: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = values.len() / 8;
    for t in 0..chunks {
        let seg = &values[t * 8..t * 8 + 8];
        for j in 0..8 {
            lanes[j] += seg[j];
        }
    }
    let mut tail = 0.0;
    for &v in &values[chunks * 8..] {
        tail += v;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail
}

/// Dot product with independent lanes (vectorizable, order-stable).
pub(crate) fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (sa, sb) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] = fmla(sa[j], sb[j], lanes[j]);
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail = fmla(x, y, tail);
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail
}

// ---------------------------------------------------------------------------
// Convolution weights
// ---------------------------------------------------------------------------

/// 4-D convolution weight block, laid out `[out_ch][in_ch][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    data: Vec<f64>,
}

impl ConvWeights {
    pub fn new(out_channels: usize, in_channels: usize, kernel_height: usize, kernel_width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = out_channels * in_channels * kernel_height * kernel_width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} weights"),
                found: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "ConvWeights::new".into(), iteration: None });
        }
        Ok(ConvWeights { out_channels, in_channels, kernel_height, kernel_width, data })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel_height: usize, kernel_width: usize) -> Self {
        let n = out_channels * in_channels * kernel_height * kernel_width;
        ConvWeights { out_channels, in_channels, kernel_height, kernel_width, data: vec![0.0; n] }
    }

    #[inline]
    pub fn at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.data[((oc * self.in_channels + ic) * self.kernel_height + ky) * self.kernel_width + kx]
    }

    #[inline]
    pub fn set(&mut self, oc: usize, ic: usize, ky: usize, kx: usize, v: f64) {
        self.data[((oc * self.in_channels + ic) * self.kernel_height + ky) * self.kernel_width + kx] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Swaps in/out channels and flips both kernel axes: the weight block of
    /// the adjoint convolution.
    fn flipped_transpose(&self) -> ConvWeights {
        let mut out = ConvWeights::zeros(self.in_channels, self.out_channels, self.kernel_height, self.kernel_width);
        for oc in 0..self.out_channels {
            for ic in 0..self.in_channels {
                for ky in 0..self.kernel_height {
                    for kx in 0..self.kernel_width {
                        out.set(ic, oc, self.kernel_height - 1 - ky, self.kernel_width - 1 - kx, self.at(oc, ic, ky, kx));
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Node values
// ---------------------------------------------------------------------------

/// Value cached at a node: an image tensor, a conv weight block, or a
/// per-channel bias vector. Scalars are 1x1x1 tensors.
#[derive(Debug, Clone)]
pub enum Value {
    Tensor(ImageTensor),
    Weights(ConvWeights),
    Bias(Vec<f64>),
}

impl Value {
    pub fn as_tensor(&self) -> Option<&ImageTensor> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_weights(&self) -> Option<&ConvWeights> {
        match self {
            Value::Weights(w) => Some(w),
            _ => None,
        }
    }

    pub fn as_bias(&self) -> Option<&[f64]> {
        match self {
            Value::Bias(b) => Some(b),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Replicate,
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv2d { input: NodeId, weights: NodeId, bias: Option<NodeId> },
    Relu(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    ClampMin { input: NodeId, floor: f64 },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ConcatBands(Vec<NodeId>),
    PadReplicate { input: NodeId, top: usize, bottom: usize, left: usize, right: usize },
    Crop(Box<CropSpec>),
    BoxSum { input: NodeId, size: usize },
    ReduceMean(NodeId),
    Scale { input: NodeId, factor: f64 },
}

/// Band selection plus strided spatial sampling with clamped (replicate)
/// indices. Covers plain crops, band extraction, and decimation grids.
#[derive(Debug, Clone)]
pub struct CropSpec {
    pub input: NodeId,
    pub band0: usize,
    pub bands: usize,
    pub row0: i64,
    pub col0: i64,
    pub height: usize,
    pub width: usize,
    pub step: usize,
}

struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

/// Gradient map returned by `Graph::backward`.
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn tensor(&self, id: NodeId) -> Option<&ImageTensor> {
        self.grads.get(id)?.as_ref()?.as_tensor()
    }

    pub fn weights(&self, id: NodeId) -> Option<&ConvWeights> {
        self.grads.get(id)?.as_ref()?.as_weights()
    }

    pub fn bias(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id)?.as_ref()?.as_bias()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registered parameter leaves, in creation order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    pub fn tensor(&self, id: NodeId) -> &ImageTensor {
        self.nodes[id].value.as_tensor().expect("node does not hold a tensor")
    }

    /// Scalar forward value of a 1x1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.tensor(id)
            .scalar_value()
            .ok_or_else(|| Error::NonScalarLoss(format!("{:?}", self.tensor(id).shape())))
    }

    fn push(&mut self, op: Op, value: Value, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    // -- leaves --------------------------------------------------------

    pub fn constant(&mut self, t: ImageTensor) -> NodeId {
        self.push(Op::Input, Value::Tensor(t), false)
    }

    pub fn param(&mut self, t: ImageTensor) -> NodeId {
        let id = self.push(Op::Input, Value::Tensor(t), true);
        self.params.push(id);
        id
    }

    pub fn constant_weights(&mut self, w: ConvWeights) -> NodeId {
        self.push(Op::Input, Value::Weights(w), false)
    }

    pub fn param_weights(&mut self, w: ConvWeights) -> NodeId {
        let id = self.push(Op::Input, Value::Weights(w), true);
        self.params.push(id);
        id
    }

    pub fn constant_bias(&mut self, b: Vec<f64>) -> NodeId {
        self.push(Op::Input, Value::Bias(b), false)
    }

    pub fn param_bias(&mut self, b: Vec<f64>) -> NodeId {
        let id = self.push(Op::Input, Value::Bias(b), true);
        self.params.push(id);
        id
    }

    // -- operations ----------------------------------------------------

    /// 2-D convolution. Replicate padding preserves spatial size; valid
    /// shrinks by (kh-1, kw-1). Kernel spatial dims must be odd and the
    /// input band count must match the kernel's input channels.
    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: Option<NodeId>, padding: Padding) -> Result<NodeId> {
        let w = self.nodes[weights]
            .value
            .as_weights()
            .ok_or_else(|| Error::InvalidArgument("conv2d: weights node does not hold weights".into()))?;
        let (kh, kw) = (w.kernel_height, w.kernel_width);
        let (oc, ic) = (w.out_channels, w.in_channels);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel { height: kh, width: kw });
        }
        let t = self.tensor(input);
        if t.bands() != ic {
            return Err(Error::ChannelMismatch { expected: ic, found: t.bands() });
        }
        if t.height() < kh || t.width() < kw {
            return Err(Error::ShapeMismatch {
                expected: format!("input at least {kh}x{kw}"),
                found: format!("{}x{}", t.height(), t.width()),
            });
        }
        if let Some(bn) = bias {
            let b = self.nodes[bn]
                .value
                .as_bias()
                .ok_or_else(|| Error::InvalidArgument("conv2d: bias node does not hold a bias vector".into()))?;
            if b.len() != oc {
                return Err(Error::ChannelMismatch { expected: oc, found: b.len() });
            }
        }
        let src = match padding {
            Padding::Valid => input,
            Padding::Replicate => self.pad_replicate(input, kh / 2, kh / 2, kw / 2, kw / 2)?,
        };
        let input_t = self.tensor(src);
        let w = self.nodes[weights].value.as_weights().unwrap();
        let b = bias.map(|bn| self.nodes[bn].value.as_bias().unwrap());
        let out = conv_valid(input_t, w, b);
        let requires = self.requires(src) || self.requires(weights) || bias.map(|bn| self.requires(bn)).unwrap_or(false);
        Ok(self.push(Op::Conv2d { input: src, weights, bias }, Value::Tensor(out), requires))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.tensor(input).map(|v| if v > 0.0 { v } else { 0.0 });
        let requires = self.requires(input);
        self.push(Op::Relu(input), Value::Tensor(out), requires)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let out = self.tensor(input).map(f64::abs);
        let requires = self.requires(input);
        self.push(Op::Abs(input), Value::Tensor(out), requires)
    }

    pub fn sqrt(&mut self, input: NodeId) -> Result<NodeId> {
        let t = self.tensor(input);
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("sqrt of negative value".into()));
        }
        let out = t.map(f64::sqrt);
        let requires = self.requires(input);
        Ok(self.push(Op::Sqrt(input), Value::Tensor(out), requires))
    }

    pub fn clamp_min(&mut self, input: NodeId, floor: f64) -> NodeId {
        let out = self.tensor(input).map(|v| if v > floor { v } else { floor });
        let requires = self.requires(input);
        self.push(Op::ClampMin { input, floor }, Value::Tensor(out), requires)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let ta = self.tensor(a);
        let tb = self.tensor(b);
        ta.check_same_shape(tb)?;
        let (bands, h, w) = ta.shape();
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(op, Value::Tensor(ImageTensor::from_parts(bands, h, w, data)), requires))
    }

    pub fn concat_bands(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&ImageTensor> = inputs.iter().map(|&id| self.tensor(id)).collect();
        let out = ImageTensor::stack_bands(&tensors)?;
        let requires = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(Op::ConcatBands(inputs.to_vec()), Value::Tensor(out), requires))
    }

    pub fn pad_replicate(&mut self, input: NodeId, top: usize, bottom: usize, left: usize, right: usize) -> Result<NodeId> {
        let out = pad_replicate_fwd(self.tensor(input), top, bottom, left, right);
        let requires = self.requires(input);
        Ok(self.push(Op::PadReplicate { input, top, bottom, left, right }, Value::Tensor(out), requires))
    }

    /// Band selection plus strided sampling; out-of-range sample indices
    /// clamp to the border (replicate extension).
    pub fn crop(&mut self, spec: CropSpec) -> Result<NodeId> {
        let t = self.tensor(spec.input);
        if spec.band0 + spec.bands > t.bands() {
            return Err(Error::BandOutOfRange { index: spec.band0 + spec.bands - 1, bands: t.bands() });
        }
        if spec.step == 0 || spec.height == 0 || spec.width == 0 {
            return Err(Error::InvalidArgument("crop: zero step or empty window".into()));
        }
        let out = crop_fwd(t, &spec);
        let requires = self.requires(spec.input);
        Ok(self.push(Op::Crop(Box::new(spec)), Value::Tensor(out), requires))
    }

    /// Valid sliding-window sum of `size` x `size` patches (both axes),
    /// computed with two 1-D running sums.
    pub fn box_sum(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let t = self.tensor(input);
        if size < 1 || t.height() < size || t.width() < size {
            return Err(Error::InvalidArgument(format!(
                "box_sum: window {size} does not fit {}x{}",
                t.height(),
                t.width()
            )));
        }
        let out = box_sum_fwd(t, size);
        let requires = self.requires(input);
        Ok(self.push(Op::BoxSum { input, size }, Value::Tensor(out), requires))
    }

    pub fn reduce_mean(&mut self, input: NodeId) -> NodeId {
        let t = self.tensor(input);
        let m = lane_sum(t.data()) / t.len() as f64;
        let requires = self.requires(input);
        self.push(Op::ReduceMean(input), Value::Tensor(ImageTensor::scalar(m)), requires)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out = self.tensor(input).map(|v| v * factor);
        let requires = self.requires(input);
        self.push(Op::Scale { input, factor }, Value::Tensor(out), requires)
    }

    // -- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node on a differentiable path; registered parameters are guaranteed
    /// present (zero-filled if disconnected). Constants get none.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.tensor(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(format!("{:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires(loss) {
            grads[loss] = Some(Value::Tensor(ImageTensor::scalar(1.0)));
        }
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.requires(id) {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        // Parameters disconnected from the loss still report a zero gradient.
        for &p in &self.params {
            if p <= loss && grads[p].is_none() {
                grads[p] = Some(match &self.nodes[p].value {
                    Value::Tensor(t) => {
                        let (b, h, w) = t.shape();
                        Value::Tensor(ImageTensor::zeros(b, h, w))
                    }
                    Value::Weights(w) => Value::Weights(ConvWeights::zeros(
                        w.out_channels,
                        w.in_channels,
                        w.kernel_height,
                        w.kernel_width,
                    )),
                    Value::Bias(b) => Value::Bias(vec![0.0; b.len()]),
                });
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, g: &Value, grads: &mut [Option<Value>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Input => {}
            Op::Conv2d { input, weights, bias } => {
                let gy = g.as_tensor().unwrap();
                let w = self.nodes[*weights].value.as_weights().unwrap();
                if self.requires(*input) {
                    let gx = conv_input_grad(gy, w);
                    acc_tensor(&mut grads[*input], gx);
                }
                if self.requires(*weights) {
                    let gw = conv_weight_grad(self.tensor(*input), gy, w.kernel_height, w.kernel_width);
                    acc_weights(&mut grads[*weights], gw);
                }
                if let Some(bn) = bias {
                    if self.requires(*bn) {
                        let plane = gy.height() * gy.width();
                        let gb: Vec<f64> = (0..gy.bands())
                            .map(|oc| lane_sum(&gy.data()[oc * plane..(oc + 1) * plane]))
                            .collect();
                        acc_bias(&mut grads[*bn], gb);
                    }
                }
            }
            Op::Relu(input) => {
                // subgradient 0 at the kink (x == 0)
                let x = self.tensor(*input);
                let gy = g.as_tensor().unwrap();
                let data: Vec<f64> = x.data().iter().zip(gy.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                let (b, h, w) = x.shape();
                acc_tensor(&mut grads[*input], ImageTensor::from_parts(b, h, w, data));
            }
            Op::Abs(input) => {
                let x = self.tensor(*input);
                let gy = g.as_tensor().unwrap();
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let (b, h, w) = x.shape();
                acc_tensor(&mut grads[*input], ImageTensor::from_parts(b, h, w, data));
            }
            Op::Sqrt(input) => {
                let y = self.tensor(id);
                let gy = g.as_tensor().unwrap();
                let data: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&s, &gv)| if s > 0.0 { gv * 0.5 / s } else { 0.0 })
                    .collect();
                let (b, h, w) = y.shape();
                acc_tensor(&mut grads[*input], ImageTensor::from_parts(b, h, w, data));
            }
            Op::ClampMin { input, floor } => {
                let x = self.tensor(*input);
                let gy = g.as_tensor().unwrap();
                let data: Vec<f64> = x.data().iter().zip(gy.data()).map(|(&v, &gv)| if v > *floor { gv } else { 0.0 }).collect();
                let (b, h, w) = x.shape();
                acc_tensor(&mut grads[*input], ImageTensor::from_parts(b, h, w, data));
            }
            Op::Add(a, b) => {
                let gy = g.as_tensor().unwrap();
                if self.requires(*a) {
                    acc_tensor(&mut grads[*a], gy.clone());
                }
                if self.requires(*b) {
                    acc_tensor(&mut grads[*b], gy.clone());
                }
            }
            Op::Sub(a, b) => {
                let gy = g.as_tensor().unwrap();
                if self.requires(*a) {
                    acc_tensor(&mut grads[*a], gy.clone());
                }
                if self.requires(*b) {
                    acc_tensor(&mut grads[*b], gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let gy = g.as_tensor().unwrap();
                if self.requires(*a) {
                    let tb = self.tensor(*b);
                    let data: Vec<f64> = gy.data().iter().zip(tb.data()).map(|(&gv, &y)| gv * y).collect();
                    let (bb, h, w) = gy.shape();
                    acc_tensor(&mut grads[*a], ImageTensor::from_parts(bb, h, w, data));
                }
                if self.requires(*b) {
                    let ta = self.tensor(*a);
                    let data: Vec<f64> = gy.data().iter().zip(ta.data()).map(|(&gv, &x)| gv * x).collect();
                    let (bb, h, w) = gy.shape();
                    acc_tensor(&mut grads[*b], ImageTensor::from_parts(bb, h, w, data));
                }
            }
            Op::Div(a, b) => {
                let gy = g.as_tensor().unwrap();
                let tb = self.tensor(*b);
                if self.requires(*a) {
                    let data: Vec<f64> = gy.data().iter().zip(tb.data()).map(|(&gv, &y)| gv / y).collect();
                    let (bb, h, w) = gy.shape();
                    acc_tensor(&mut grads[*a], ImageTensor::from_parts(bb, h, w, data));
                }
                if self.requires(*b) {
                    let ta = self.tensor(*a);
                    let data: Vec<f64> = gy
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                        .collect();
                    let (bb, h, w) = gy.shape();
                    acc_tensor(&mut grads[*b], ImageTensor::from_parts(bb, h, w, data));
                }
            }
            Op::ConcatBands(inputs) => {
                let gy = g.as_tensor().unwrap();
                let mut band0 = 0;
                for &inp in inputs {
                    let t = self.tensor(inp);
                    let nb = t.bands();
                    if self.requires(inp) {
                        let plane = gy.height() * gy.width();
                        let slice = gy.data()[band0 * plane..(band0 + nb) * plane].to_vec();
                        acc_tensor(&mut grads[inp], ImageTensor::from_parts(nb, gy.height(), gy.width(), slice));
                    }
                    band0 += nb;
                }
            }
            Op::PadReplicate { input, top, bottom, left, right } => {
                let gy = g.as_tensor().unwrap();
                let x = self.tensor(*input);
                let (bands, h, w) = x.shape();
                let (nh, nw) = (gy.height(), gy.width());
                debug_assert_eq!((nh, nw), (h + top + bottom, w + left + right));
                let mut gx = ImageTensor::zeros(bands, h, w);
                let gxd = gx.data_mut();
                let gyd = gy.data();
                for b in 0..bands {
                    for pr in 0..nh {
                        let sr = (pr as i64 - *top as i64).clamp(0, h as i64 - 1) as usize;
                        let grow = &gyd[(b * nh + pr) * nw..][..nw];
                        let xrow = &mut gxd[(b * h + sr) * w..][..w];
                        xrow[0] += grow[..*left].iter().sum::<f64>();
                        for c in 0..w {
                            xrow[c] += grow[left + c];
                        }
                        xrow[w - 1] += grow[left + w..].iter().sum::<f64>();
                    }
                }
                acc_tensor(&mut grads[*input], gx);
            }
            Op::Crop(spec) => {
                let gy = g.as_tensor().unwrap();
                let x = self.tensor(spec.input);
                let (bands, h, w) = x.shape();
                let mut gx = ImageTensor::zeros(bands, h, w);
                for ob in 0..spec.bands {
                    let sb = spec.band0 + ob;
                    for orr in 0..spec.height {
                        let sr = (spec.row0 + (orr * spec.step) as i64).clamp(0, h as i64 - 1) as usize;
                        for oc in 0..spec.width {
                            let sc = (spec.col0 + (oc * spec.step) as i64).clamp(0, w as i64 - 1) as usize;
                            let v = gx.at(sb, sr, sc) + gy.at(ob, orr, oc);
                            gx.set(sb, sr, sc, v);
                        }
                    }
                }
                acc_tensor(&mut grads[spec.input], gx);
            }
            Op::BoxSum { input, size } => {
                let gy = g.as_tensor().unwrap();
                let x = self.tensor(*input);
                acc_tensor(&mut grads[*input], box_sum_adjoint(gy, *size, x.height(), x.width()));
            }
            Op::ReduceMean(input) => {
                let gv = g.as_tensor().unwrap().scalar_value().unwrap();
                let x = self.tensor(*input);
                let (b, h, w) = x.shape();
                acc_tensor(&mut grads[*input], ImageTensor::constant(b, h, w, gv / x.len() as f64));
            }
            Op::Scale { input, factor } => {
                let gy = g.as_tensor().unwrap();
                acc_tensor(&mut grads[*input], gy.map(|v| v * factor));
            }
        }
        Ok(())
    }
}

fn acc_tensor(slot: &mut Option<Value>, add: ImageTensor) {
    match slot {
        None => *slot = Some(Value::Tensor(add)),
        Some(Value::Tensor(t)) => {
            debug_assert_eq!(t.shape(), add.shape());
            for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
        _ => unreachable!("gradient kind mismatch"),
    }
}

fn acc_weights(slot: &mut Option<Value>, add: ConvWeights) {
    match slot {
        None => *slot = Some(Value::Weights(add)),
        Some(Value::Weights(w)) => {
            for (a, b) in w.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
        _ => unreachable!("gradient kind mismatch"),
    }
}

fn acc_bias(slot: &mut Option<Value>, add: Vec<f64>) {
    match slot {
        None => *slot = Some(Value::Bias(add)),
        Some(Value::Bias(b)) => {
            for (a, v) in b.iter_mut().zip(add) {
                *a += v;
            }
        }
        _ => unreachable!("gradient kind mismatch"),
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

const X_BLOCK: usize = 8;
const OC_BLOCK: usize = 4;

/// Valid-mode convolution. Per-output accumulation order is bias, then
/// (in_ch, ky, kx) ascending; the nested-loop oracle in the tests follows the
/// same order, so results compare bit-exactly.
///
/// Output channels are register-blocked in fours and the row loop stays
/// outermost so one row window of the input serves every channel block.
pub(crate) fn conv_valid(input: &ImageTensor, w: &ConvWeights, bias: Option<&[f64]>) -> ImageTensor {
    let (ic_n, ih, iw) = input.shape();
    debug_assert_eq!(ic_n, w.in_channels);
    let (kh, kw) = (w.kernel_height, w.kernel_width);
    let oc_n = w.out_channels;
    let oh = ih - kh + 1;
    let ow = iw - kw + 1;
    let ind = input.data();
    let mut out = vec![0.0f64; oc_n * oh * ow];
    let ksteps = ic_n * kh * kw;
    let nblocks = oc_n.div_ceil(OC_BLOCK);

    // Weights repacked so each block's channels sit contiguously per
    // (ic, ky, kx) step, zero-filled where the last block is partial.
    let mut packed = vec![0.0f64; nblocks * ksteps * OC_BLOCK];
    let mut binit = vec![0.0f64; nblocks * OC_BLOCK];
    for blk in 0..nblocks {
        let oc0 = blk * OC_BLOCK;
        let ocb = (oc_n - oc0).min(OC_BLOCK);
        let base = blk * ksteps * OC_BLOCK;
        let mut s = 0;
        for ic in 0..ic_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    for l in 0..ocb {
                        packed[base + s * OC_BLOCK + l] = w.at(oc0 + l, ic, ky, kx);
                    }
                    s += 1;
                }
            }
        }
        if let Some(bb) = bias {
            for l in 0..ocb {
                binit[blk * OC_BLOCK + l] = bb[oc0 + l];
            }
        }
    }

    for blk in 0..nblocks {
        let oc0 = blk * OC_BLOCK;
        let ocb = (oc_n - oc0).min(OC_BLOCK);
        let wbase = blk * ksteps * OC_BLOCK;
        for y in 0..oh {
            let mut x0 = 0;
            while x0 < ow {
                let xb = (ow - x0).min(X_BLOCK);
                if xb == X_BLOCK {
                    let mut acc = [[0.0f64; X_BLOCK]; OC_BLOCK];
                    for (l, lane) in acc.iter_mut().enumerate() {
                        *lane = [binit[blk * OC_BLOCK + l]; X_BLOCK];
                    }
                    // SAFETY: rows y+ky < ih; columns x0+kx+X_BLOCK <= ow+kw-1 = iw;
                    // packed walks ksteps * OC_BLOCK entries in (ic, ky, kx) order.
                    unsafe {
                        let mut wp = packed.as_ptr().add(wbase);
                        for ic in 0..ic_n {
                            let mut rp = ind.as_ptr().add((ic * ih + y) * iw + x0);
                            for _ky in 0..kh {
                                for kx in 0..kw {
                                    let seg = std::slice::from_raw_parts(rp.add(kx), X_BLOCK);
                                    let w0 = *wp;
                                    let w1 = *wp.add(1);
                                    let w2 = *wp.add(2);
                                    let w3 = *wp.add(3);
                                    for j in 0..X_BLOCK {
                                        acc[0][j] = fmla(w0, seg[j], acc[0][j]);
                                        acc[1][j] = fmla(w1, seg[j], acc[1][j]);
                                        acc[2][j] = fmla(w2, seg[j], acc[2][j]);
                                        acc[3][j] = fmla(w3, seg[j], acc[3][j]);
                                    }
                                    wp = wp.add(OC_BLOCK);
                                }
                                rp = rp.add(iw);
                            }
                        }
                    }
                    for (l, lane) in acc.iter().enumerate().take(ocb) {
                        let obase = ((oc0 + l) * oh + y) * ow + x0;
                        out[obase..obase + X_BLOCK].copy_from_slice(lane);
                    }
                } else {
                    // Tail columns: same accumulation order, safe indexing.
                    let mut acc = [[0.0f64; X_BLOCK]; OC_BLOCK];
                    for (l, lane) in acc.iter_mut().enumerate() {
                        *lane = [binit[blk * OC_BLOCK + l]; X_BLOCK];
                    }
                    let mut s = 0;
                    for ic in 0..ic_n {
                        for ky in 0..kh {
                            let rbase = (ic * ih + y + ky) * iw + x0;
                            for kx in 0..kw {
                                for l in 0..OC_BLOCK {
                                    let wv = packed[wbase + s * OC_BLOCK + l];
                                    for j in 0..xb {
                                        acc[l][j] = fmla(wv, ind[rbase + kx + j], acc[l][j]);
                                    }
                                }
                                s += 1;
                            }
                        }
                    }
                    for (l, lane) in acc.iter().enumerate().take(ocb) {
                        let obase = ((oc0 + l) * oh + y) * ow + x0;
                        out[obase..obase + xb].copy_from_slice(&lane[..xb]);
                    }
                }
                x0 += xb;
            }
        }
    }
    ImageTensor::from_parts(oc_n, oh, ow, out)
}

/// Gradient of a valid conv w.r.t. its input: correlate the (zero-extended)
/// output gradient with the channel-swapped, axis-flipped weights.
fn conv_input_grad(gy: &ImageTensor, w: &ConvWeights) -> ImageTensor {
    let (kh, kw) = (w.kernel_height, w.kernel_width);
    let padded = zero_pad(gy, kh - 1, kw - 1);
    let wt = w.flipped_transpose();
    conv_valid(&padded, &wt, None)
}

fn zero_pad(t: &ImageTensor, py: usize, px: usize) -> ImageTensor {
    let (bands, h, w) = t.shape();
    let (nh, nw) = (h + 2 * py, w + 2 * px);
    let mut out = vec![0.0f64; bands * nh * nw];
    for b in 0..bands {
        for r in 0..h {
            let src = &t.data()[(b * h + r) * w..][..w];
            let dst = (b * nh + r + py) * nw + px;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    ImageTensor::from_parts(bands, nh, nw, out)
}

/// Gradient of a valid conv w.r.t. its weights. Two output channels and four
/// kernel columns accumulate per fused pass so input row segments are shared
/// across eight independent chains.
fn conv_weight_grad(input: &ImageTensor, gy: &ImageTensor, kh: usize, kw: usize) -> ConvWeights {
    let (ic_n, ih, iw) = input.shape();
    let (oc_n, oh, ow) = gy.shape();
    debug_assert_eq!((oh, ow), (ih - kh + 1, iw - kw + 1));
    let ind = input.data();
    let gd = gy.data();
    let mut out = ConvWeights::zeros(oc_n, ic_n, kh, kw);
    let chunks = ow / 4;
    let mut oc = 0;
    while oc < oc_n {
        let paired = oc + 1 < oc_n;
        for ic in 0..ic_n {
            for ky in 0..kh {
                let mut kx0 = 0;
                while kx0 + 4 <= kw {
                    let mut a0 = [[0.0f64; 4]; 4];
                    let mut a1 = [[0.0f64; 4]; 4];
                    for y in 0..oh {
                        let g0 = &gd[(oc * oh + y) * ow..][..ow];
                        let g1 = if paired { &gd[((oc + 1) * oh + y) * ow..][..ow] } else { g0 };
                        let xrow = &ind[(ic * ih + y + ky) * iw..][..iw];
                        // SAFETY: x+kx0+l+4 <= chunks*4 + kw-1 <= ow+kw-1 = iw
                        unsafe {
                            for t in 0..chunks {
                                let x = t * 4;
                                let gv0 = g0.get_unchecked(x..x + 4);
                                let gv1 = g1.get_unchecked(x..x + 4);
                                for l in 0..4 {
                                    let xv = xrow.get_unchecked(x + kx0 + l..x + kx0 + l + 4);
                                    for j in 0..4 {
                                        a0[l][j] = fmla(gv0[j], xv[j], a0[l][j]);
                                        a1[l][j] = fmla(gv1[j], xv[j], a1[l][j]);
                                    }
                                }
                            }
                        }
                        for x in chunks * 4..ow {
                            for l in 0..4 {
                                a0[l][0] = fmla(g0[x], xrow[x + kx0 + l], a0[l][0]);
                                a1[l][0] = fmla(g1[x], xrow[x + kx0 + l], a1[l][0]);
                            }
                        }
                    }
                    for l in 0..4 {
                        out.set(oc, ic, ky, kx0 + l, (a0[l][0] + a0[l][1]) + (a0[l][2] + a0[l][3]));
                        if paired {
                            out.set(oc + 1, ic, ky, kx0 + l, (a1[l][0] + a1[l][1]) + (a1[l][2] + a1[l][3]));
                        }
                    }
                    kx0 += 4;
                }
                for kx in kx0..kw {
                    for o in oc..(oc + if paired { 2 } else { 1 }) {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let gyrow = &gd[(o * oh + y) * ow..][..ow];
                            let xrow = &ind[(ic * ih + y + ky) * iw..][..iw];
                            acc += lane_dot(gyrow, &xrow[kx..kx + ow]);
                        }
                        out.set(o, ic, ky, kx, acc);
                    }
                }
            }
        }
        oc += 2;
    }
    out
}

fn pad_replicate_fwd(t: &ImageTensor, top: usize, bottom: usize, left: usize, right: usize) -> ImageTensor {
    let (bands, h, w) = t.shape();
    let (nh, nw) = (h + top + bottom, w + left + right);
    let mut out = vec![0.0f64; bands * nh * nw];
    for b in 0..bands {
        for r in 0..nh {
            let sr = (r as i64 - top as i64).clamp(0, h as i64 - 1) as usize;
            let src = &t.data()[(b * h + sr) * w..][..w];
            let dst = &mut out[(b * nh + r) * nw..][..nw];
            dst[..left].fill(src[0]);
            dst[left..left + w].copy_from_slice(src);
            dst[left + w..].fill(src[w - 1]);
        }
    }
    ImageTensor::from_parts(bands, nh, nw, out)
}

fn crop_fwd(t: &ImageTensor, spec: &CropSpec) -> ImageTensor {
    let (_, h, w) = t.shape();
    let mut out = ImageTensor::zeros(spec.bands, spec.height, spec.width);
    for ob in 0..spec.bands {
        let sb = spec.band0 + ob;
        for orr in 0..spec.height {
            let sr = (spec.row0 + (orr * spec.step) as i64).clamp(0, h as i64 - 1) as usize;
            for oc in 0..spec.width {
                let sc = (spec.col0 + (oc * spec.step) as i64).clamp(0, w as i64 - 1) as usize;
                out.set(ob, orr, oc, t.at(sb, sr, sc));
            }
        }
    }
    out
}

/// Valid box sum via two 1-D running sums.
fn box_sum_fwd(t: &ImageTensor, size: usize) -> ImageTensor {
    let (bands, h, w) = t.shape();
    let (oh, ow) = (h - size + 1, w - size + 1);
    // rows pass
    let mut tmp = vec![0.0f64; bands * h * ow];
    for b in 0..bands {
        for r in 0..h {
            let row = &t.data()[(b * h + r) * w..][..w];
            let orow = &mut tmp[(b * h + r) * ow..][..ow];
            let mut acc = 0.0;
            for &v in &row[..size] {
                acc += v;
            }
            orow[0] = acc;
            for x in 1..ow {
                acc += row[x + size - 1] - row[x - 1];
                orow[x] = acc;
            }
        }
    }
    // cols pass
    let mut out = vec![0.0f64; bands * oh * ow];
    for b in 0..bands {
        for c in 0..ow {
            let mut acc = 0.0;
            for r in 0..size {
                acc += tmp[(b * h + r) * ow + c];
            }
            out[(b * oh) * ow + c] = acc;
            for r in 1..oh {
                acc += tmp[(b * h + r + size - 1) * ow + c] - tmp[(b * h + r - 1) * ow + c];
                out[(b * oh + r) * ow + c] = acc;
            }
        }
    }
    ImageTensor::from_parts(bands, oh, ow, out)
}

/// Adjoint of the valid box sum: every input cell receives the sum of the
/// output-gradient windows it participated in.
fn box_sum_adjoint(gy: &ImageTensor, size: usize, in_h: usize, in_w: usize) -> ImageTensor {
    let (bands, oh, ow) = gy.shape();
    debug_assert_eq!((oh, ow), (in_h - size + 1, in_w - size + 1));
    // adjoint along columns first (reverse of forward order)
    let mut tmp = vec![0.0f64; bands * in_h * ow];
    for b in 0..bands {
        for c in 0..ow {
            // prefix over output rows
            let mut prefix = vec![0.0f64; oh + 1];
            for r in 0..oh {
                prefix[r + 1] = prefix[r] + gy.at(b, r, c);
            }
            for p in 0..in_h {
                let lo = p as i64 - size as i64 + 1;
                let lo = lo.max(0) as usize;
                let hi = p.min(oh - 1);
                if lo <= hi {
                    tmp[(b * in_h + p) * ow + c] = prefix[hi + 1] - prefix[lo];
                }
            }
        }
    }
    // adjoint along rows
    let mut out = ImageTensor::zeros(bands, in_h, in_w);
    for b in 0..bands {
        for r in 0..in_h {
            let row = &tmp[(b * in_h + r) * ow..][..ow];
            let mut prefix = vec![0.0f64; ow + 1];
            for x in 0..ow {
                prefix[x + 1] = prefix[x] + row[x];
            }
            for p in 0..in_w {
                let lo = p as i64 - size as i64 + 1;
                let lo = lo.max(0) as usize;
                let hi = p.min(ow - 1);
                if lo <= hi {
                    out.set(b, r, p, prefix[hi + 1] - prefix[lo]);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub points: usize,
}

/// At most this many coordinates are probed per check; larger inputs are
/// sampled with a fixed stride so runs stay deterministic.
const GRAD_CHECK_MAX_COORDS: usize = 320;

/// Central finite-difference check of `d loss / d point`.
///
/// `build` must construct the same scalar loss from any input node; it is
/// invoked once for the analytic gradient and twice per probed coordinate.
/// The relative step is `eps` (scaled per coordinate by `max(|v|, 1)`).
pub fn grad_check<F>(op: &str, point: &ImageTensor, eps: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check: eps must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = build(&mut g, x)?;
    let lt = g.tensor(loss);
    if !lt.is_scalar() {
        return Err(Error::NonScalarLoss(format!("{:?}", lt.shape())));
    }
    let grads = g.backward(loss)?;
    let analytic = grads
        .tensor(x)
        .cloned()
        .unwrap_or_else(|| ImageTensor::zeros(point.bands(), point.height(), point.width()));

    let n = point.len();
    let stride = n.div_ceil(GRAD_CHECK_MAX_COORDS).max(1);
    let mut max_rel = 0.0f64;
    let mut points = 0usize;
    let mut eval = |t: &ImageTensor| -> Result<f64> {
        let mut g2 = Graph::new();
        let x2 = g2.param(t.clone());
        let l2 = build(&mut g2, x2)?;
        g2.scalar(l2)
    };
    for i in (0..n).step_by(stride) {
        let v = point.data()[i];
        let h = eps * v.abs().max(1.0);
        let mut plus = point.clone();
        plus.data_mut()[i] = v + h;
        let mut minus = point.clone();
        minus.data_mut()[i] = v - h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
        points += 1;
    }
    Ok(GradCheckReport { op: op.to_string(), max_rel_error: max_rel, points })
}
