//! Reverse-mode differentiation over volume-valued expressions.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Inputs always precede the nodes that consume them, so a single reverse
//! sweep from a scalar root accumulates exact adjoints into every leaf.
//!
//! Scalars are one-channel, one-voxel volumes.
//!
//! ```
//! use lobeseg::autodiff::Tape;
//! use lobeseg::volume::{ChannelVolume, Shape3};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(ChannelVolume::new(1, Shape3::new(1, 1, 2).unwrap(), vec![1.0, -2.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum_all(y);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0]);
//! ```

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::volume::{ChannelVolume, Shape3};

/// Floor applied to the argument of [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    Log(NodeId),
    Exp(NodeId),
    OneMinus(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    ChannelProduct(NodeId),
    ChannelSum(NodeId),
    NormalizeChannels(NodeId),
    Select {
        input: NodeId,
        channels: Vec<usize>,
    },
    Concat(Vec<NodeId>),
    Repeat {
        input: NodeId,
        times: usize,
    },
    SpatialSum(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    L1Norm(NodeId),
    Conv3 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Smooth {
        input: NodeId,
        kernel: Vec<f64>,
    },
    Warp {
        image: NodeId,
        field: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: ChannelVolume,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of a node, or `None` for nodes that do not depend on any leaf.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn layout_mismatch(what: &str, a: &ChannelVolume, b: &ChannelVolume) -> Error {
    Error::param(format!(
        "{what}: operands differ in layout ({}×{:?} vs {}×{:?})",
        a.channels(),
        a.shape().dims(),
        b.channels(),
        b.shape().dims()
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ChannelVolume, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: ChannelVolume) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: ChannelVolume) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, id: NodeId) -> &ChannelVolume {
        &self.node(id).value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.node(id).value;
        debug_assert_eq!(v.len(), 1);
        v.data()[0]
    }

    /// Copy of `a` cut off from gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.node(a).value.clone();
        self.constant(v)
    }

    fn binary(
        &mut self,
        what: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if !va.same_layout(vb) {
            return Err(layout_mismatch(what, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = ChannelVolume::from_raw(va.channels(), va.shape(), data);
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let va = &self.node(a).value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = ChannelVolume::from_raw(va.channels(), va.shape(), data);
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scalar_mul(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, Op::ScalarMul(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Per-voxel softmax across channels.
    pub fn softmax_channels(&mut self, logits: NodeId) -> Result<NodeId> {
        let v = &self.node(logits).value;
        let c = v.channels();
        if c < 2 {
            return Err(Error::param("softmax needs at least two channels"));
        }
        if v.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let n = v.shape().len();
        let src = v.data();
        let mut out = vec![0.0; c * n];
        for i in 0..n {
            let m = (0..c)
                .map(|k| src[k * n + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (src[k * n + i] - m).exp();
                out[k * n + i] = e;
                s += e;
            }
            for k in 0..c {
                out[k * n + i] /= s;
            }
        }
        let value = ChannelVolume::from_raw(c, v.shape(), out);
        let needs = self.needs(&[logits]);
        Ok(self.push(value, Op::Softmax(logits), needs))
    }

    /// Stride-1 max pooling over a cube of edge `2 * radius + 1`; outside the
    /// volume counts as 0. The adjoint goes to the first maximum in scan order.
    pub fn maxpool3(&mut self, input: NodeId, radius: usize) -> Result<NodeId> {
        if radius == 0 {
            return Err(Error::param("max-pool radius must be at least 1"));
        }
        let v = &self.node(input).value;
        let (out, argmax) = kernels::maxpool_forward(v.data(), v.channels(), v.shape(), radius);
        let value = ChannelVolume::from_raw(v.channels(), v.shape(), out);
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, needs))
    }

    /// Per-voxel product over all channels (one output channel).
    pub fn channel_product(&mut self, a: NodeId) -> NodeId {
        let v = &self.node(a).value;
        let n = v.shape().len();
        let out = (0..n)
            .map(|i| (0..v.channels()).map(|k| v.data()[k * n + i]).product())
            .collect();
        let value = ChannelVolume::from_raw(1, v.shape(), out);
        let needs = self.needs(&[a]);
        self.push(value, Op::ChannelProduct(a), needs)
    }

    /// Per-voxel sum over all channels (one output channel).
    pub fn channel_sum(&mut self, a: NodeId) -> NodeId {
        let v = &self.node(a).value;
        let n = v.shape().len();
        let out = (0..n)
            .map(|i| (0..v.channels()).map(|k| v.data()[k * n + i]).sum())
            .collect();
        let value = ChannelVolume::from_raw(1, v.shape(), out);
        let needs = self.needs(&[a]);
        self.push(value, Op::ChannelSum(a), needs)
    }

    /// Divides every channel by the per-voxel channel sum.
    pub fn normalize_channels(&mut self, a: NodeId) -> NodeId {
        let v = &self.node(a).value;
        let n = v.shape().len();
        let c = v.channels();
        let mut out = v.data().to_vec();
        for i in 0..n {
            let s: f64 = (0..c).map(|k| v.data()[k * n + i]).sum();
            for k in 0..c {
                out[k * n + i] /= s;
            }
        }
        let value = ChannelVolume::from_raw(c, v.shape(), out);
        let needs = self.needs(&[a]);
        self.push(value, Op::NormalizeChannels(a), needs)
    }

    /// Gathers the listed channels, in order.
    pub fn select_channels(&mut self, input: NodeId, channels: &[usize]) -> Result<NodeId> {
        let v = &self.node(input).value;
        if channels.is_empty() {
            return Err(Error::param("select_channels needs at least one channel"));
        }
        if let Some(&bad) = channels.iter().find(|&&c| c >= v.channels()) {
            return Err(Error::Range(format!(
                "channel {bad} out of {} channels",
                v.channels()
            )));
        }
        let mut out = Vec::with_capacity(channels.len() * v.shape().len());
        for &c in channels {
            out.extend_from_slice(v.channel(c));
        }
        let value = ChannelVolume::from_raw(channels.len(), v.shape(), out);
        let needs = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::Select {
                input,
                channels: channels.to_vec(),
            },
            needs,
        ))
    }

    pub fn select_channel(&mut self, input: NodeId, channel: usize) -> Result<NodeId> {
        self.select_channels(input, &[channel])
    }

    /// Stacks inputs of equal spatial shape along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::param("concat needs at least one input"))?;
        let shape = self.node(*first).value.shape();
        let mut out = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let v = &self.node(p).value;
            if v.shape() != shape {
                return Err(Error::param("concat inputs differ in shape"));
            }
            channels += v.channels();
            out.extend_from_slice(v.data());
        }
        let value = ChannelVolume::from_raw(channels, shape, out);
        let needs = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    /// Tiles the channels of `input` `times` times.
    pub fn repeat_channels(&mut self, input: NodeId, times: usize) -> Result<NodeId> {
        if times == 0 {
            return Err(Error::param("repeat count must be positive"));
        }
        let v = &self.node(input).value;
        let out = v.data().repeat(times);
        let value = ChannelVolume::from_raw(v.channels() * times, v.shape(), out);
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Repeat { input, times }, needs))
    }

    /// Per-channel sum over all voxels; result has the same channel count and
    /// a single voxel.
    pub fn spatial_sum(&mut self, a: NodeId) -> NodeId {
        let v = &self.node(a).value;
        let out = (0..v.channels())
            .map(|c| v.channel(c).iter().sum())
            .collect();
        let value = ChannelVolume::from_raw(v.channels(), Shape3::unit(), out);
        let needs = self.needs(&[a]);
        self.push(value, Op::SpatialSum(a), needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.node(a).value.data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(ChannelVolume::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.node(a).value;
        let s: f64 = v.data().iter().sum();
        let m = s / v.len() as f64;
        let needs = self.needs(&[a]);
        self.push(ChannelVolume::scalar(m), Op::MeanAll(a), needs)
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.node(a).value.data().iter().map(|x| x.abs()).sum();
        let needs = self.needs(&[a]);
        self.push(ChannelVolume::scalar(s), Op::L1Norm(a), needs)
    }

    /// Same-size 3×3×3 convolution with zero padding. `weight` has
    /// `c_out * c_in` channels over a 3×3×3 grid (kernel `(o, i)` is channel
    /// `o * c_in + i`); `bias` has `c_out` channels over one voxel.
    pub fn conv3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vi, vw, vb) = (
            &self.node(input).value,
            &self.node(weight).value,
            &self.node(bias).value,
        );
        let c_in = vi.channels();
        let c_out = vb.channels();
        if vw.shape() != Shape3::cube(3)? || vw.channels() != c_out * c_in {
            return Err(Error::param(format!(
                "conv3 weight must be {}×3×3×3, got {}×{:?}",
                c_out * c_in,
                vw.channels(),
                vw.shape().dims()
            )));
        }
        if vb.shape() != Shape3::unit() {
            return Err(Error::param("conv3 bias must be one voxel per channel"));
        }
        let out = kernels::conv3_forward(vi.data(), c_in, vi.shape(), vw.data(), vb.data(), c_out);
        let value = ChannelVolume::from_raw(c_out, vi.shape(), out);
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv3 {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Separable Gaussian smoothing per channel, kernel truncated at 3σ and
    /// renormalized where clipped by the border.
    pub fn gaussian_smooth(&mut self, input: NodeId, sigma: f64) -> Result<NodeId> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::param(format!("sigma must be positive, got {sigma}")));
        }
        let kernel = kernels::gaussian_kernel(sigma);
        let v = &self.node(input).value;
        let out = kernels::smooth(v.data(), v.channels(), v.shape(), &kernel);
        let value = ChannelVolume::from_raw(v.channels(), v.shape(), out);
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Smooth { input, kernel }, needs))
    }

    /// Resamples a single-channel image at `x - u(x)` (trilinear, zero outside),
    /// where `field` holds the three displacement components in voxels.
    pub fn warp(&mut self, image: NodeId, field: NodeId) -> Result<NodeId> {
        let (vi, vf) = (&self.node(image).value, &self.node(field).value);
        if vi.channels() != 1 || vf.channels() != 3 || vi.shape() != vf.shape() {
            return Err(Error::param(
                "warp needs a one-channel image and a three-channel field of the same shape",
            ));
        }
        let out = kernels::warp_forward(vi.data(), vf.data(), vi.shape());
        let value = ChannelVolume::from_raw(1, vi.shape(), out);
        let needs = self.needs(&[image, field]);
        Ok(self.push(value, Op::Warp { image, field }, needs))
    }

    /// Reverse sweep from a scalar `root`. Consumes the tape; leaves that the
    /// root does not depend on receive zero adjoints.
    pub fn backward(self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} is not on this tape",
                root.0
            )));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, node {} has {} entries",
                root.0,
                self.nodes[root.0].value.len()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = node.value.data();
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    acc.add(*a, || g.clone());
                    acc.add(*b, || g.clone());
                }
                Op::Sub(a, b) => {
                    acc.add(*a, || g.clone());
                    acc.add(*b, || g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.add(*a, || g.iter().zip(vb).map(|(g, b)| g * b).collect());
                    acc.add(*b, || g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.add(*a, || g.iter().zip(vb).map(|(g, b)| g / b).collect());
                    acc.add(*b, || {
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect()
                    });
                }
                Op::ScalarMul(a, k) => acc.add(*a, || g.iter().map(|g| g * k).collect()),
                Op::AddScalar(a) => acc.add(*a, || g.clone()),
                Op::Log(a) => {
                    let va = nodes[a.0].value.data();
                    acc.add(*a, || {
                        g.iter()
                            .zip(va)
                            .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                            .collect()
                    });
                }
                Op::Exp(a) => acc.add(*a, || g.iter().zip(y).map(|(g, y)| g * y).collect()),
                Op::OneMinus(a) => acc.add(*a, || g.iter().map(|g| -g).collect()),
                Op::Tanh(a) => acc.add(*a, || {
                    g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()
                }),
                Op::Softmax(a) => acc.add(*a, || {
                    let c = node.value.channels();
                    let n = node.value.shape().len();
                    let mut out = vec![0.0; c * n];
                    for i in 0..n {
                        let dot: f64 = (0..c).map(|k| g[k * n + i] * y[k * n + i]).sum();
                        for k in 0..c {
                            out[k * n + i] = y[k * n + i] * (g[k * n + i] - dot);
                        }
                    }
                    out
                }),
                Op::MaxPool { input, argmax } => acc.add(*input, || {
                    let mut out = vec![0.0; nodes[input.0].value.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        if src != kernels::PADDED {
                            out[src] += g[o];
                        }
                    }
                    out
                }),
                Op::ChannelProduct(a) => acc.add(*a, || {
                    let v = &nodes[a.0].value;
                    let (c, n) = (v.channels(), v.shape().len());
                    let x = v.data();
                    let mut out = vec![0.0; c * n];
                    for i in 0..n {
                        for j in 0..c {
                            let others: f64 =
                                (0..c).filter(|&k| k != j).map(|k| x[k * n + i]).product();
                            out[j * n + i] = g[i] * others;
                        }
                    }
                    out
                }),
                Op::ChannelSum(a) => acc.add(*a, || g.repeat(nodes[a.0].value.channels())),
                Op::NormalizeChannels(a) => acc.add(*a, || {
                    let v = &nodes[a.0].value;
                    let (c, n) = (v.channels(), v.shape().len());
                    let x = v.data();
                    let mut out = vec![0.0; c * n];
                    for i in 0..n {
                        let s: f64 = (0..c).map(|k| x[k * n + i]).sum();
                        let dot: f64 = (0..c).map(|k| g[k * n + i] * y[k * n + i]).sum();
                        for k in 0..c {
                            out[k * n + i] = (g[k * n + i] - dot) / s;
                        }
                    }
                    out
                }),
                Op::Select { input, channels } => acc.add(*input, || {
                    let v = &nodes[input.0].value;
                    let n = v.shape().len();
                    let mut out = vec![0.0; v.len()];
                    for (j, &c) in channels.iter().enumerate() {
                        for i in 0..n {
                            out[c * n + i] += g[j * n + i];
                        }
                    }
                    out
                }),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        acc.add(p, || g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Repeat { input, times } => acc.add(*input, || {
                    let len = nodes[input.0].value.len();
                    let mut out = vec![0.0; len];
                    for t in 0..*times {
                        for (o, gv) in out.iter_mut().zip(&g[t * len..(t + 1) * len]) {
                            *o += gv;
                        }
                    }
                    out
                }),
                Op::SpatialSum(a) => acc.add(*a, || {
                    let v = &nodes[a.0].value;
                    let n = v.shape().len();
                    (0..v.len()).map(|i| g[i / n]).collect()
                }),
                Op::SumAll(a) => acc.add(*a, || vec![g[0]; nodes[a.0].value.len()]),
                Op::MeanAll(a) => acc.add(*a, || {
                    let len = nodes[a.0].value.len();
                    vec![g[0] / len as f64; len]
                }),
                Op::L1Norm(a) => acc.add(*a, || {
                    nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .map(|&x| {
                            if x > 0.0 {
                                g[0]
                            } else if x < 0.0 {
                                -g[0]
                            } else {
                                0.0
                            }
                        })
                        .collect()
                }),
                Op::Conv3 {
                    input,
                    weight,
                    bias,
                } => {
                    let vi = &nodes[input.0].value;
                    let (gi, gw, gb) = kernels::conv3_backward(
                        vi.data(),
                        vi.channels(),
                        vi.shape(),
                        nodes[weight.0].value.data(),
                        node.value.channels(),
                        &g,
                    );
                    acc.add(*input, || gi);
                    acc.add(*weight, || gw);
                    acc.add(*bias, || gb);
                }
                Op::Smooth { input, kernel } => acc.add(*input, || {
                    kernels::smooth_adjoint(&g, node.value.channels(), node.value.shape(), kernel)
                }),
                Op::Warp { image, field } => {
                    let (gi, gf) = kernels::warp_backward(
                        nodes[image.0].value.data(),
                        nodes[field.0].value.data(),
                        node.value.shape(),
                        &g,
                    );
                    acc.add(*image, || gi);
                    acc.add(*field, || gf);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    /// Adds a lazily computed contribution to the adjoint of `target`.
    fn add(&mut self, target: NodeId, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let c = contribution();
        match &mut self.grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(&c) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, rel_error};

    fn vol(channels: usize, shape: Shape3, data: Vec<f64>) -> ChannelVolume {
        ChannelVolume::new(channels, shape, data).unwrap()
    }

    fn seq(channels: usize, shape: Shape3, seed: u64) -> ChannelVolume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * shape.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        vol(channels, shape, data)
    }

    fn cube(n: usize) -> Shape3 {
        Shape3::cube(n).unwrap()
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let mut t = Tape::new();
        let a = t.constant(vol(2, Shape3::unit(), vec![0.0, 0.0]));
        let s = t.softmax_channels(a).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let b = t.constant(vol(2, Shape3::unit(), vec![3.0, 3.7]));
        let c = t.constant(vol(2, Shape3::unit(), vec![-40.0, -39.3]));
        let sb = t.softmax_channels(b).unwrap();
        let sc = t.softmax_channels(c).unwrap();
        for (x, y) in t.value(sb).data().iter().zip(t.value(sc).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_and_single_channel() {
        let mut t = Tape::new();
        let one = t.constant(vol(1, Shape3::unit(), vec![0.0]));
        assert!(t.softmax_channels(one).is_err());
        let v = ChannelVolume::from_raw(2, Shape3::unit(), vec![f64::NAN, 0.0]);
        let bad = t.constant(v);
        assert!(matches!(t.softmax_channels(bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = seq(3, cube(2), 7);
        let err = check_gradient(&x, 1e-6, |t, n| {
            let s = t.softmax_channels(n)?;
            let w = t.constant(seq(3, cube(2), 8));
            let p = t.mul(s, w)?;
            Ok(t.sum_all(p))
        })
        .unwrap();
        assert!(err < 1e-6, "softmax rel err {err}");
    }

    #[test]
    fn maxpool_line_example() {
        let mut t = Tape::new();
        let x = t.leaf(vol(1, Shape3::new(1, 1, 3).unwrap(), vec![1.0, 3.0, 2.0]));
        let m = t.maxpool3(x, 1).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 3.0, 3.0]);
        let s = t.sum_all(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn maxpool_zero_input_and_radius_zero() {
        let mut t = Tape::new();
        let x = t.leaf(ChannelVolume::zeros(1, cube(3)));
        assert!(t.maxpool3(x, 0).is_err());
        let m = t.maxpool3(x, 1).unwrap();
        assert!(t.value(m).data().iter().all(|&v| v == 0.0));
        let z = t.constant(ChannelVolume::zeros(1, cube(3)));
        let p = t.mul(m, z).unwrap();
        let s = t.sum_all(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_tie_goes_to_first_in_scan_order() {
        let mut t = Tape::new();
        let x = t.leaf(vol(1, Shape3::new(3, 1, 1).unwrap(), vec![2.0, 2.0, 1.0]));
        let m = t.maxpool3(x, 1).unwrap();
        let s = t.sum_all(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_and_l1_unit_adjoints() {
        let mut t = Tape::new();
        let x = t.leaf(vol(1, cube(2), vec![0.5; 8]));
        let s = t.l1_norm(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));

        let mut t = Tape::new();
        let x = t.leaf(seq(2, cube(2), 3));
        let s = t.sum_all(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(seq(1, cube(2), 1));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(seq(1, cube(2), 2));
        let d = t.detach(x);
        let p = t.mul(x, d).unwrap();
        let s = t.sum_all(p);
        let xv = t.value(x).data().to_vec();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), xv.as_slice());
    }

    #[test]
    fn unreached_leaf_gets_zero_adjoint() {
        let mut t = Tape::new();
        let x = t.leaf(seq(1, cube(2), 2));
        let y = t.leaf(seq(1, cube(2), 3));
        let s = t.sum_all(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_mismatch_is_error() {
        let mut t = Tape::new();
        let a = t.leaf(seq(1, cube(2), 1));
        let b = t.leaf(seq(2, cube(2), 1));
        assert!(t.add(a, b).is_err());
    }

    fn positive(channels: usize, shape: Shape3, seed: u64) -> ChannelVolume {
        let v = seq(channels, shape, seed);
        vol(
            channels,
            shape,
            v.data().iter().map(|x| 0.2 + x.abs()).collect(),
        )
    }

    #[test]
    fn elementwise_gradients() {
        let shape = cube(2);
        let x = positive(2, shape, 11);
        let w = seq(2, shape, 12);
        let err = check_gradient(&x, 1e-6, |t, n| {
            let c = t.constant(w.clone());
            let a = t.add(n, c)?;
            let sq = t.mul(n, n)?;
            let b = t.sub(a, sq)?;
            let l = t.log(n);
            let e = t.exp(b);
            let d = t.div(l, e)?;
            let o = t.one_minus(d);
            let h = t.tanh(o);
            let k = t.scalar_mul(h, -1.7);
            let q = t.add_scalar(k, 0.3);
            let r = t.mul(q, c)?;
            Ok(t.mean_all(r))
        })
        .unwrap();
        assert!(err < 1e-6, "elementwise rel err {err}");
    }

    #[test]
    fn structural_gradients() {
        let shape = Shape3::new(2, 3, 2).unwrap();
        let x = positive(3, shape, 21);
        let w = seq(4, shape, 22);
        let err = check_gradient(&x, 1e-6, |t, n| {
            let p = t.channel_product(n);
            let s = t.channel_sum(n);
            let norm = t.normalize_channels(n);
            let sel = t.select_channels(norm, &[2, 0])?;
            let cat = t.concat_channels(&[p, s])?;
            let rep = t.repeat_channels(cat, 2)?;
            let sel2 = t.select_channels(rep, &[0, 3, 1, 2])?;
            let both = t.concat_channels(&[sel, sel2])?;
            let both = t.select_channels(both, &[0, 1, 2, 3])?;
            let c = t.constant(w.clone());
            let prod = t.mul(both, c)?;
            let ss = t.spatial_sum(prod);
            let l1 = t.l1_norm(ss);
            Ok(l1)
        })
        .unwrap();
        assert!(err < 1e-6, "structural rel err {err}");
    }

    #[test]
    fn conv_gradients_all_operands() {
        let shape = Shape3::new(3, 2, 3).unwrap();
        let input = seq(2, shape, 31);
        let weight = seq(6, cube(3), 32);
        let bias = seq(3, Shape3::unit(), 33);
        let target = seq(3, shape, 34);
        let loss = |t: &mut Tape, i: NodeId, w: NodeId, b: NodeId| -> Result<NodeId> {
            let y = t.conv3(i, w, b)?;
            let y = t.tanh(y);
            let c = t.constant(target.clone());
            let p = t.mul(y, c)?;
            Ok(t.sum_all(p))
        };
        let e1 = check_gradient(&input, 1e-6, |t, n| {
            let w = t.constant(weight.clone());
            let b = t.constant(bias.clone());
            loss(t, n, w, b)
        })
        .unwrap();
        let e2 = check_gradient(&weight, 1e-6, |t, n| {
            let i = t.constant(input.clone());
            let b = t.constant(bias.clone());
            loss(t, i, n, b)
        })
        .unwrap();
        let e3 = check_gradient(&bias, 1e-6, |t, n| {
            let i = t.constant(input.clone());
            let w = t.constant(weight.clone());
            loss(t, i, w, n)
        })
        .unwrap();
        assert!(e1 < 1e-6 && e2 < 1e-6 && e3 < 1e-6, "{e1} {e2} {e3}");
    }

    #[test]
    fn smooth_and_warp_gradients() {
        let shape = Shape3::new(4, 3, 3).unwrap();
        let img = positive(1, shape, 41);
        let w = seq(1, shape, 42);
        let err = check_gradient(&img, 1e-6, |t, n| {
            let f = t.repeat_channels(n, 3)?;
            let f = t.scalar_mul(f, 0.37);
            let f = t.gaussian_smooth(f, 0.8)?;
            let warped = t.warp(n, f)?;
            let c = t.constant(w.clone());
            let p = t.mul(warped, c)?;
            Ok(t.sum_all(p))
        })
        .unwrap();
        assert!(err < 1e-5, "warp rel err {err}");
    }

    #[test]
    fn maxpool_gradient_away_from_ties() {
        // Distinct values spaced far apart relative to the step.
        let shape = Shape3::new(3, 3, 2).unwrap();
        let data: Vec<f64> = (0..shape.len())
            .map(|i| ((i * 7) % 18) as f64 * 0.05 + 0.1)
            .collect();
        let x = vol(1, shape, data);
        let w = seq(1, shape, 51);
        let err = check_gradient(&x, 1e-6, |t, n| {
            let m = t.maxpool3(n, 1)?;
            let c = t.constant(w.clone());
            let p = t.mul(m, c)?;
            Ok(t.sum_all(p))
        })
        .unwrap();
        assert!(err < 1e-6, "maxpool rel err {err}");
    }

    #[test]
    fn rel_error_metric() {
        assert_eq!(rel_error(&[1.0], &[1.0]), 0.0);
        assert!((rel_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 4 * 8)) {
            let mut t = Tape::new();
            let x = t.constant(vol(4, cube(2), vals));
            let s = t.softmax_channels(x).unwrap();
            let v = t.value(s);
            for i in 0..8 {
                let sum: f64 = (0..4).map(|k| v.data()[k * 8 + i]).sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn maxpool_is_monotone(
            base in proptest::collection::vec(0.0f64..1.0, 27),
            bump in proptest::collection::vec(0.0f64..1.0, 27),
        ) {
            let mut t = Tape::new();
            let a = t.constant(vol(1, cube(3), base.clone()));
            let b = t.constant(vol(1, cube(3), base.iter().zip(&bump).map(|(x, y)| x + y).collect()));
            let ma = t.maxpool3(a, 1).unwrap();
            let mb = t.maxpool3(b, 1).unwrap();
            for (x, y) in t.value(ma).data().iter().zip(t.value(mb).data()) {
                proptest::prop_assert!(x <= y);
            }
        }

        #[test]
        fn l1_norm_nonnegative(vals in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let mut t = Tape::new();
            let zero = vals.iter().all(|&v| v == 0.0);
            let x = t.constant(vol(1, cube(2), vals));
            let l = t.l1_norm(x);
            proptest::prop_assert!(t.scalar(l) >= 0.0);
            proptest::prop_assert_eq!(t.scalar(l) == 0.0, zero);
        }
    }
}
