//! Reverse-mode automatic differentiation over `GridTensor` values.
//!
//! A `Tape` records one computation as an append-only list of nodes; inputs
//! of a node always precede it, so the node order is a topological order and
//! `backward` is a single reverse sweep. Adjoints live in a scratch buffer
//! owned by `backward`, which makes repeated backward passes from the same
//! root bitwise identical.
//!
//! Every operation validates its inputs and checks the produced value for
//! NaN/Inf; a non-finite result is a contract violation surfaced as
//! `Error::NonFinite`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::{idx4, GridTensor};

/// Stride/dilation/groups/padding bundle for `conv2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn plain() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(invalid("conv2d: stride must be >= 1"));
        }
        if self.dilation < 1 {
            return Err(invalid("conv2d: dilation must be >= 1"));
        }
        if self.groups < 1 {
            return Err(invalid("conv2d: groups must be >= 1"));
        }
        Ok(())
    }
}

/// Batch-statistics vs running-statistics normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean/variance of one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn fresh(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// How a batchnorm node sources its statistics.
pub enum BnForward<'a> {
    /// Normalize by batch statistics and fold them into the running stats.
    Train {
        running: &'a mut RunningStats,
        momentum: f64,
    },
    /// Normalize by the stored running statistics.
    Eval { running: &'a RunningStats },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Relu {
        input: NodeId,
    },
    PRelu {
        input: NodeId,
        slope: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    AvgPoolHalf {
        input: NodeId,
    },
    UpsampleBilinear {
        input: NodeId,
        factor: usize,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    MulGate {
        input: NodeId,
        gate: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        input: NodeId,
        mul: f64,
    },
    LnClamped {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    PowConst {
        input: NodeId,
        exponent: f64,
    },
    SumAll {
        input: NodeId,
    },
    SumChannelwise {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
}

struct Node {
    value: GridTensor,
    op: Op,
}

/// One recorded computation, from constants and parameters to a loss scalar.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
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

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &GridTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op_name: &str, value: GridTensor, op: Op) -> Result<NodeId> {
        value.check_finite(op_name)?;
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that never receives a gradient entry.
    pub fn constant(&mut self, value: GridTensor) -> Result<NodeId> {
        self.push("constant", value, Op::Constant)
    }

    /// A named leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, name: &str, value: GridTensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(invalid(format!("parameter {name} registered twice")));
        }
        let id = self.push("param", value, Op::Param)?;
        self.params.insert(String::from(name), id);
        Ok(id)
    }

    // ----- network primitives -------------------------------------------

    /// 2-D convolution over N×C×H×W with zero padding.
    ///
    /// Kernel layout is Cout×(Cin/groups)×kh×kw; `groups == Cin == Cout`
    /// gives channel-wise convolution. The output spatial extent is
    /// `floor((H + 2*padding - dilation*(k-1) - 1)/stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        spec.validate()?;
        let x = self.value(input);
        let k = self.value(kernel);
        let (_, cin, _, _) = x.dims4("conv2d input")?;
        let (cout, kcin, kh, kw) = k.dims4("conv2d kernel")?;
        if kh < 1 || kw < 1 || cout < 1 {
            return Err(invalid("conv2d: kernel extents must be >= 1"));
        }
        if cin % spec.groups != 0 {
            return Err(invalid(format!(
                "conv2d: input channels {cin} not divisible by groups {}",
                spec.groups
            )));
        }
        if cout % spec.groups != 0 {
            return Err(invalid(format!(
                "conv2d: output channels {cout} not divisible by groups {}",
                spec.groups
            )));
        }
        if kcin != cin / spec.groups {
            return Err(shape_mismatch("conv2d", x.shape(), k.shape()));
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(shape_mismatch("conv2d bias", k.shape(), bv.shape()));
            }
        }
        let bias_val = bias.map(|b| self.value(b).clone());
        let out = conv2d_forward(self.value(input), self.value(kernel), bias_val.as_ref(), spec)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
        )
    }

    /// Per-channel batch normalization over N×C×H×W.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        stats: BnForward<'_>,
        eps: f64,
    ) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(invalid("batchnorm2d: epsilon must be > 0"));
        }
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("batchnorm2d input")?;
        let m = n * h * w;
        if m == 0 {
            return Err(invalid(
                "batchnorm2d: zero batch or spatial size (no values to normalize)",
            ));
        }
        let sv = self.value(scale);
        if sv.shape() != [c] {
            return Err(shape_mismatch("batchnorm2d scale", x.shape(), sv.shape()));
        }
        let tv = self.value(shift);
        if tv.shape() != [c] {
            return Err(shape_mismatch("batchnorm2d shift", x.shape(), tv.shape()));
        }

        let (mean, invstd, train) = match stats {
            BnForward::Train { running, momentum } => {
                if m < 2 {
                    return Err(invalid(
                        "batchnorm2d: training mode needs at least 2 values per channel",
                    ));
                }
                if running.mean.len() != c || running.var.len() != c {
                    return Err(invalid(format!(
                        "batchnorm2d: running stats track {} channels, input has {c}",
                        running.mean.len()
                    )));
                }
                let (mean, var) = batch_moments(x, n, c, h, w);
                let mf = m as f64;
                for ci in 0..c {
                    // Biased variance normalizes; the unbiased one feeds the
                    // running estimate, matching the common convention.
                    running.mean[ci] = (1.0 - momentum) * running.mean[ci] + momentum * mean[ci];
                    running.var[ci] =
                        (1.0 - momentum) * running.var[ci] + momentum * var[ci] * mf / (mf - 1.0);
                }
                let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
                (mean, invstd, true)
            }
            BnForward::Eval { running } => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(invalid(format!(
                        "batchnorm2d: running stats track {} channels, input has {c}",
                        running.mean.len()
                    )));
                }
                let invstd = running
                    .var
                    .iter()
                    .map(|&v| 1.0 / libm::sqrt(v + eps))
                    .collect();
                (running.mean.clone(), invstd, false)
            }
        };

        let x = self.value(input);
        let sv = self.value(scale).data();
        let tv = self.value(shift).data();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, g, b) = (mean[ci], invstd[ci], sv[ci], tv[ci]);
                for hi in 0..h {
                    for wi in 0..w {
                        let i = idx4(c, h, w, ni, ci, hi, wi);
                        out[i] = (x.data()[i] - mu) * is * g + b;
                    }
                }
            }
        }
        let value = GridTensor::from_parts(x.shape().to_vec(), out);
        self.push(
            "batchnorm2d",
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                invstd,
                train,
            },
        )
    }

    /// Element-wise max(x, 0).
    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu { input })
    }

    /// Parametric ReLU with one slope per channel of an N×C×H×W input.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("prelu input")?;
        let s = self.value(slope);
        if s.shape() != [c] {
            return Err(shape_mismatch("prelu slope", x.shape(), s.shape()));
        }
        let sd = s.data();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let i = idx4(c, h, w, ni, ci, hi, wi);
                        let v = x.data()[i];
                        out[i] = if v > 0.0 { v } else { sd[ci] * v };
                    }
                }
            }
        }
        let value = GridTensor::from_parts(x.shape().to_vec(), out);
        self.push("prelu", value, Op::PRelu { input, slope })
    }

    /// Element-wise logistic sigmoid.
    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(|v| 1.0 / (1.0 + libm::exp(-v)));
        self.push("sigmoid", value, Op::Sigmoid { input })
    }

    /// Spatial mean: N×C×H×W -> N×C×1×1.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("global_avg_pool input")?;
        if h < 1 || w < 1 {
            return Err(invalid("global_avg_pool: spatial extents must be >= 1"));
        }
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        acc += x.data()[idx4(c, h, w, ni, ci, hi, wi)];
                    }
                }
                out[ni * c + ci] = acc / (h * w) as f64;
            }
        }
        let value = GridTensor::from_parts(vec![n, c, 1, 1], out);
        self.push("global_avg_pool", value, Op::GlobalAvgPool { input })
    }

    /// 2×2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool_half(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("avg_pool_half input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!(
                "avg_pool_half: spatial extents must be even, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..ho {
                    for wi in 0..wo {
                        let mut acc = 0.0;
                        for dh in 0..2 {
                            for dw in 0..2 {
                                acc += x.data()[idx4(c, h, w, ni, ci, 2 * hi + dh, 2 * wi + dw)];
                            }
                        }
                        out[idx4(c, ho, wo, ni, ci, hi, wi)] = acc / 4.0;
                    }
                }
            }
        }
        let value = GridTensor::from_parts(vec![n, c, ho, wo], out);
        self.push("avg_pool_half", value, Op::AvgPoolHalf { input })
    }

    /// Bilinear upsampling by an integer factor with the half-pixel-centers
    /// convention: source coordinate of output index `j` is
    /// `clamp((j + 0.5)/factor - 0.5, 0, in - 1)`, then linear interpolation
    /// between the two straddling samples. Exact on constant fields.
    pub fn upsample_bilinear(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 1 {
            return Err(invalid("upsample_bilinear: factor must be >= 1"));
        }
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("upsample_bilinear input")?;
        if h < 1 || w < 1 {
            return Err(invalid("upsample_bilinear: spatial extents must be >= 1"));
        }
        let rows = sample_positions(h, factor);
        let cols = sample_positions(w, factor);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * ho * wo];
        for ni in 0..n {
            for ci in 0..c {
                for (hi, &(r0, r1, rt)) in rows.iter().enumerate() {
                    for (wi, &(c0, c1, ct)) in cols.iter().enumerate() {
                        let v00 = x.data()[idx4(c, h, w, ni, ci, r0, c0)];
                        let v01 = x.data()[idx4(c, h, w, ni, ci, r0, c1)];
                        let v10 = x.data()[idx4(c, h, w, ni, ci, r1, c0)];
                        let v11 = x.data()[idx4(c, h, w, ni, ci, r1, c1)];
                        let top = v00 * (1.0 - ct) + v01 * ct;
                        let bottom = v10 * (1.0 - ct) + v11 * ct;
                        out[idx4(c, ho, wo, ni, ci, hi, wi)] = top * (1.0 - rt) + bottom * rt;
                    }
                }
            }
        }
        let value = GridTensor::from_parts(vec![n, c, ho, wo], out);
        self.push(
            "upsample_bilinear",
            value,
            Op::UpsampleBilinear { input, factor },
        )
    }

    /// Channel concatenation of two N×C×H×W tensors; `a` leads.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let (na, ca, ha, wa) = av.dims4("concat_channels lhs")?;
        let (nb, cb, hb, wb) = bv.dims4("concat_channels rhs")?;
        if na != nb || ha != hb || wa != wb {
            return Err(shape_mismatch("concat_channels", av.shape(), bv.shape()));
        }
        let c = ca + cb;
        let mut out = vec![0.0; na * c * ha * wa];
        for ni in 0..na {
            for ci in 0..c {
                for hi in 0..ha {
                    for wi in 0..wa {
                        let v = if ci < ca {
                            av.data()[idx4(ca, ha, wa, ni, ci, hi, wi)]
                        } else {
                            bv.data()[idx4(cb, ha, wa, ni, ci - ca, hi, wi)]
                        };
                        out[idx4(c, ha, wa, ni, ci, hi, wi)] = v;
                    }
                }
            }
        }
        let value = GridTensor::from_parts(vec![na, c, ha, wa], out);
        self.push("concat_channels", value, Op::ConcatChannels { a, b })
    }

    /// Numerically stabilized softmax over the channel axis of a C×H×W or
    /// N×C×H×W tensor.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = as_nchw(x, "softmax_channels")?;
        if c < 1 {
            return Err(invalid("softmax_channels: needs at least one channel"));
        }
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mut maxv = f64::NEG_INFINITY;
                    for ci in 0..c {
                        maxv = maxv.max(x.data()[idx4(c, h, w, ni, ci, hi, wi)]);
                    }
                    let mut denom = 0.0;
                    for ci in 0..c {
                        let e = libm::exp(x.data()[idx4(c, h, w, ni, ci, hi, wi)] - maxv);
                        out[idx4(c, h, w, ni, ci, hi, wi)] = e;
                        denom += e;
                    }
                    for ci in 0..c {
                        out[idx4(c, h, w, ni, ci, hi, wi)] /= denom;
                    }
                }
            }
        }
        let value = GridTensor::from_parts(x.shape().to_vec(), out);
        self.push("softmax_channels", value, Op::SoftmaxChannels { input })
    }

    /// Fully connected map: x (N×K) with weight (M×K) and bias (M) -> N×M.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let wv = self.value(weight);
        let (n, k) = x.dims2("linear input")?;
        let (m, kw) = wv.dims2("linear weight")?;
        if kw != k {
            return Err(shape_mismatch("linear", x.shape(), wv.shape()));
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(shape_mismatch("linear bias", wv.shape(), bv.shape()));
            }
        }
        let x = self.value(input);
        let wv = self.value(weight);
        let mut out = vec![0.0; n * m];
        for ni in 0..n {
            for mi in 0..m {
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += x.data()[ni * k + ki] * wv.data()[mi * k + ki];
                }
                out[ni * m + mi] = acc;
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            for ni in 0..n {
                for mi in 0..m {
                    out[ni * m + mi] += bv.data()[mi];
                }
            }
        }
        let value = GridTensor::from_parts(vec![n, m], out);
        self.push(
            "linear",
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// Per-channel gating: x (N×C×H×W) scaled by gate (N×C×1×1), gate
    /// broadcast over the spatial extent.
    pub fn mul_gate(&mut self, input: NodeId, gate: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let g = self.value(gate);
        let (n, c, h, w) = x.dims4("mul_gate input")?;
        if g.shape() != [n, c, 1, 1] {
            return Err(shape_mismatch("mul_gate", x.shape(), g.shape()));
        }
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let gv = g.data()[ni * c + ci];
                for hi in 0..h {
                    for wi in 0..w {
                        let i = idx4(c, h, w, ni, ci, hi, wi);
                        out[i] = x.data()[i] * gv;
                    }
                }
            }
        }
        let value = GridTensor::from_parts(x.shape().to_vec(), out);
        self.push("mul_gate", value, Op::MulGate { input, gate })
    }

    // ----- element-wise and reduction primitives -------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "div", |x, y| x / y)?;
        self.push("div", value, Op::Div { a, b })
    }

    /// y = mul*x + add with scalar constants.
    pub fn affine(&mut self, input: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let value = self.value(input).map(|v| mul * v + add);
        self.push("affine", value, Op::Affine { input, mul })
    }

    /// Natural log of the input clamped into [lo, hi].
    pub fn ln_clamped(&mut self, input: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid("ln_clamped: need 0 < lo <= hi"));
        }
        let value = self.value(input).map(|v| libm::log(v.max(lo).min(hi)));
        self.push("ln_clamped", value, Op::LnClamped { input, lo, hi })
    }

    /// Element-wise x^exponent for a fixed exponent.
    pub fn pow_const(&mut self, input: NodeId, exponent: f64) -> Result<NodeId> {
        let value = self.value(input).map(|v| libm::pow(v, exponent));
        self.push("pow_const", value, Op::PowConst { input, exponent })
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId> {
        let value = GridTensor::scalar(self.value(input).sum());
        self.push("sum_all", value, Op::SumAll { input })
    }

    /// Per-channel sum over batch and spatial axes: C×H×W or N×C×H×W -> C.
    pub fn sum_channelwise(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = as_nchw(x, "sum_channelwise")?;
        let mut out = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[ci] += x.data()[idx4(c, h, w, ni, ci, hi, wi)];
                    }
                }
            }
        }
        let value = GridTensor::from_parts(vec![c], out);
        self.push("sum_channelwise", value, Op::SumChannelwise { input })
    }

    /// Shape change without data movement.
    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { input })
    }

    // ----- reverse sweep --------------------------------------------------

    /// Propagates adjoints from a scalar root and returns one gradient per
    /// registered parameter; parameters the root does not reach get zeros.
    pub fn backward(&self, root: NodeId) -> Result<BTreeMap<String, GridTensor>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adjoints: Vec<Option<GridTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[root.0] = Some(GridTensor::full(root_value.shape().to_vec(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let adj = match adjoints[i].take() {
                Some(a) => a,
                None => continue,
            };
            self.propagate(i, &adj, &mut adjoints)?;
            adjoints[i] = Some(adj);
        }

        let mut grads = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &adjoints[id.0] {
                Some(a) => a.clone(),
                None => GridTensor::zeros(self.value(*id).shape().to_vec()),
            };
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    fn propagate(
        &self,
        node: usize,
        adj: &GridTensor,
        adjoints: &mut [Option<GridTensor>],
    ) -> Result<()> {
        match &self.nodes[node].op {
            Op::Constant | Op::Param => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let (dx, dk, db) =
                    conv2d_backward(self.value(*input), self.value(*kernel), adj, *spec);
                accumulate(adjoints, *input, dx);
                accumulate(adjoints, *kernel, dk);
                if let Some(b) = bias {
                    accumulate(adjoints, *b, db);
                }
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                invstd,
                train,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("batchnorm2d")?;
                let sv = self.value(*scale).data();
                let m = (n * h * w) as f64;
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                let mut dx = vec![0.0; x.len()];
                for ci in 0..c {
                    let (mu, is) = (mean[ci], invstd[ci]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                let i = idx4(c, h, w, ni, ci, hi, wi);
                                let g = adj.data()[i];
                                let xhat = (x.data()[i] - mu) * is;
                                sum_g += g;
                                sum_gx += g * xhat;
                            }
                        }
                    }
                    dscale[ci] = sum_gx;
                    dshift[ci] = sum_g;
                    let gam_is = sv[ci] * is;
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                let i = idx4(c, h, w, ni, ci, hi, wi);
                                let g = adj.data()[i];
                                if *train {
                                    let xhat = (x.data()[i] - mu) * is;
                                    dx[i] = gam_is * (g - sum_g / m - xhat * sum_gx / m);
                                } else {
                                    dx[i] = gam_is * g;
                                }
                            }
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(x.shape().to_vec(), dx));
                accumulate(adjoints, *scale, GridTensor::from_parts(vec![c], dscale));
                accumulate(adjoints, *shift, GridTensor::from_parts(vec![c], dshift));
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let dx = adj.zip(x, "relu backward", |g, v| if v > 0.0 { g } else { 0.0 })?;
                accumulate(adjoints, *input, dx);
            }
            Op::PRelu { input, slope } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("prelu")?;
                let sd = self.value(*slope).data();
                let mut dx = vec![0.0; x.len()];
                let mut ds = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let i = idx4(c, h, w, ni, ci, hi, wi);
                                let v = x.data()[i];
                                let g = adj.data()[i];
                                if v > 0.0 {
                                    dx[i] = g;
                                } else {
                                    dx[i] = g * sd[ci];
                                    ds[ci] += g * v;
                                }
                            }
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(x.shape().to_vec(), dx));
                accumulate(adjoints, *slope, GridTensor::from_parts(vec![c], ds));
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[node].value;
                let dx = adj.zip(y, "sigmoid backward", |g, s| g * s * (1.0 - s))?;
                accumulate(adjoints, *input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("global_avg_pool")?;
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = adj.data()[ni * c + ci] * inv;
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[idx4(c, h, w, ni, ci, hi, wi)] = g;
                            }
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::AvgPoolHalf { input } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("avg_pool_half")?;
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..ho {
                            for wi in 0..wo {
                                let g = adj.data()[idx4(c, ho, wo, ni, ci, hi, wi)] / 4.0;
                                for dh in 0..2 {
                                    for dw in 0..2 {
                                        dx[idx4(c, h, w, ni, ci, 2 * hi + dh, 2 * wi + dw)] = g;
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::UpsampleBilinear { input, factor } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("upsample_bilinear")?;
                let rows = sample_positions(h, *factor);
                let cols = sample_positions(w, *factor);
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for (hi, &(r0, r1, rt)) in rows.iter().enumerate() {
                            for (wi, &(c0, c1, ct)) in cols.iter().enumerate() {
                                let g = adj.data()[idx4(c, ho, wo, ni, ci, hi, wi)];
                                dx[idx4(c, h, w, ni, ci, r0, c0)] += g * (1.0 - rt) * (1.0 - ct);
                                dx[idx4(c, h, w, ni, ci, r0, c1)] += g * (1.0 - rt) * ct;
                                dx[idx4(c, h, w, ni, ci, r1, c0)] += g * rt * (1.0 - ct);
                                dx[idx4(c, h, w, ni, ci, r1, c1)] += g * rt * ct;
                            }
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::ConcatChannels { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, ca, h, w) = av.dims4("concat_channels")?;
                let cb = bv.shape()[1];
                let c = ca + cb;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let g = adj.data()[idx4(c, h, w, ni, ci, hi, wi)];
                                if ci < ca {
                                    da[idx4(ca, h, w, ni, ci, hi, wi)] = g;
                                } else {
                                    db[idx4(cb, h, w, ni, ci - ca, hi, wi)] = g;
                                }
                            }
                        }
                    }
                }
                accumulate(adjoints, *a, GridTensor::from_parts(av.shape().to_vec(), da));
                accumulate(adjoints, *b, GridTensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::SoftmaxChannels { input } => {
                let y = &self.nodes[node].value;
                let (n, c, h, w) = as_nchw(y, "softmax_channels")?;
                let mut dx = vec![0.0; y.len()];
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let mut dot = 0.0;
                            for ci in 0..c {
                                let i = idx4(c, h, w, ni, ci, hi, wi);
                                dot += adj.data()[i] * y.data()[i];
                            }
                            for ci in 0..c {
                                let i = idx4(c, h, w, ni, ci, hi, wi);
                                dx[i] = y.data()[i] * (adj.data()[i] - dot);
                            }
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wv = self.value(*weight);
                let (n, k) = x.dims2("linear")?;
                let (m, _) = wv.dims2("linear")?;
                let mut dx = vec![0.0; n * k];
                let mut dw = vec![0.0; m * k];
                let mut db = vec![0.0; m];
                for ni in 0..n {
                    for mi in 0..m {
                        let g = adj.data()[ni * m + mi];
                        db[mi] += g;
                        for ki in 0..k {
                            dx[ni * k + ki] += g * wv.data()[mi * k + ki];
                            dw[mi * k + ki] += g * x.data()[ni * k + ki];
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(vec![n, k], dx));
                accumulate(adjoints, *weight, GridTensor::from_parts(vec![m, k], dw));
                if let Some(b) = bias {
                    accumulate(adjoints, *b, GridTensor::from_parts(vec![m], db));
                }
            }
            Op::MulGate { input, gate } => {
                let x = self.value(*input);
                let g = self.value(*gate);
                let (n, c, h, w) = x.dims4("mul_gate")?;
                let mut dx = vec![0.0; x.len()];
                let mut dg = vec![0.0; n * c];
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g.data()[ni * c + ci];
                        let mut acc = 0.0;
                        for hi in 0..h {
                            for wi in 0..w {
                                let i = idx4(c, h, w, ni, ci, hi, wi);
                                dx[i] = adj.data()[i] * gv;
                                acc += adj.data()[i] * x.data()[i];
                            }
                        }
                        dg[ni * c + ci] = acc;
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(x.shape().to_vec(), dx));
                accumulate(adjoints, *gate, GridTensor::from_parts(vec![n, c, 1, 1], dg));
            }
            Op::Add { a, b } => {
                accumulate(adjoints, *a, adj.clone());
                accumulate(adjoints, *b, adj.clone());
            }
            Op::Sub { a, b } => {
                accumulate(adjoints, *a, adj.clone());
                accumulate(adjoints, *b, adj.map(|g| -g));
            }
            Op::Mul { a, b } => {
                let da = adj.zip(self.value(*b), "mul backward", |g, y| g * y)?;
                let db = adj.zip(self.value(*a), "mul backward", |g, x| g * x)?;
                accumulate(adjoints, *a, da);
                accumulate(adjoints, *b, db);
            }
            Op::Div { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = adj.zip(bv, "div backward", |g, y| g / y)?;
                let mut db = vec![0.0; bv.len()];
                for i in 0..bv.len() {
                    let y = bv.data()[i];
                    db[i] = -adj.data()[i] * av.data()[i] / (y * y);
                }
                accumulate(adjoints, *a, da);
                accumulate(adjoints, *b, GridTensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Affine { input, mul, .. } => {
                accumulate(adjoints, *input, adj.map(|g| g * mul));
            }
            Op::LnClamped { input, lo, hi } => {
                let x = self.value(*input);
                let dx = adj.zip(x, "ln_clamped backward", |g, v| {
                    if v >= *lo && v <= *hi {
                        g / v
                    } else {
                        0.0
                    }
                })?;
                accumulate(adjoints, *input, dx);
            }
            Op::PowConst { input, exponent } => {
                let x = self.value(*input);
                let e = *exponent;
                let dx = adj.zip(x, "pow_const backward", |g, v| {
                    g * e * libm::pow(v, e - 1.0)
                })?;
                accumulate(adjoints, *input, dx);
            }
            Op::SumAll { input } => {
                let x = self.value(*input);
                let g = adj.item();
                accumulate(adjoints, *input, GridTensor::full(x.shape().to_vec(), g));
            }
            Op::SumChannelwise { input } => {
                let x = self.value(*input);
                let (n, c, h, w) = as_nchw(x, "sum_channelwise")?;
                let mut dx = vec![0.0; x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[idx4(c, h, w, ni, ci, hi, wi)] = adj.data()[ci];
                            }
                        }
                    }
                }
                accumulate(adjoints, *input, GridTensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::Reshape { input } => {
                let x = self.value(*input);
                let dx = adj.reshaped(x.shape().to_vec())?;
                accumulate(adjoints, *input, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(adjoints: &mut [Option<GridTensor>], target: NodeId, contribution: GridTensor) {
    match &mut adjoints[target.0] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Treats C×H×W as 1×C×H×W so channel-axis ops cover both layouts.
fn as_nchw(t: &GridTensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((1, c, h, w)),
        &[n, c, h, w] => Ok((n, c, h, w)),
        other => Err(invalid(format!(
            "{op}: expected a C×H×W or N×C×H×W tensor, got shape {other:?}"
        ))),
    }
}

/// (index0, index1, fraction) for each output position along one axis under
/// the half-pixel-centers convention.
fn sample_positions(extent: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let mut table = Vec::with_capacity(extent * factor);
    for j in 0..extent * factor {
        let src = (j as f64 + 0.5) / factor as f64 - 0.5;
        let src = src.max(0.0).min((extent - 1) as f64);
        let i0 = libm::floor(src) as usize;
        let i1 = (i0 + 1).min(extent - 1);
        table.push((i0, i1, src - i0 as f64));
    }
    table
}

fn conv_out_extent(input: usize, k: usize, spec: ConvSpec) -> Result<usize> {
    let reach = spec
        .dilation
        .checked_mul(k - 1)
        .and_then(|v| v.checked_add(1))
        .ok_or_else(|| invalid("conv2d: kernel reach overflows"))?;
    let padded = input + 2 * spec.padding;
    if padded < reach {
        return Err(invalid(format!(
            "conv2d: padded extent {padded} is smaller than the kernel reach {reach}"
        )));
    }
    Ok((padded - reach) / spec.stride + 1)
}

fn conv2d_forward(
    x: &GridTensor,
    k: &GridTensor,
    bias: Option<&GridTensor>,
    spec: ConvSpec,
) -> Result<GridTensor> {
    let (n, cin, h, w) = x.dims4("conv2d input")?;
    let (cout, cin_g, kh, kw) = k.dims4("conv2d kernel")?;
    let ho = conv_out_extent(h, kh, spec)?;
    let wo = conv_out_extent(w, kw, spec)?;
    let cout_g = cout / spec.groups;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            let b = bias.map_or(0.0, |bv| bv.data()[co]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b;
                    for cil in 0..cin_g {
                        let ci = g * cin_g + cil;
                        for khi in 0..kh {
                            let ih = (oh * spec.stride + khi * spec.dilation) as isize
                                - spec.padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iw = (ow * spec.stride + kwi * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += x.data()[idx4(cin, h, w, ni, ci, ih as usize, iw as usize)]
                                    * k.data()[idx4(cin_g, kh, kw, co, cil, khi, kwi)];
                            }
                        }
                    }
                    out[idx4(cout, ho, wo, ni, co, oh, ow)] = acc;
                }
            }
        }
    }
    Ok(GridTensor::from_parts(vec![n, cout, ho, wo], out))
}

fn conv2d_backward(
    x: &GridTensor,
    k: &GridTensor,
    adj: &GridTensor,
    spec: ConvSpec,
) -> (GridTensor, GridTensor, GridTensor) {
    let (n, cin, h, w) = x.dims4("conv2d input").expect("validated at forward");
    let (cout, cin_g, kh, kw) = k.dims4("conv2d kernel").expect("validated at forward");
    let (_, _, ho, wo) = adj.dims4("conv2d adjoint").expect("validated at forward");
    let cout_g = cout / spec.groups;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = adj.data()[idx4(cout, ho, wo, ni, co, oh, ow)];
                    db[co] += gv;
                    for cil in 0..cin_g {
                        let ci = g * cin_g + cil;
                        for khi in 0..kh {
                            let ih = (oh * spec.stride + khi * spec.dilation) as isize
                                - spec.padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iw = (ow * spec.stride + kwi * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xi = idx4(cin, h, w, ni, ci, ih as usize, iw as usize);
                                let ki = idx4(cin_g, kh, kw, co, cil, khi, kwi);
                                dx[xi] += gv * k.data()[ki];
                                dk[ki] += gv * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        GridTensor::from_parts(x.shape().to_vec(), dx),
        GridTensor::from_parts(k.shape().to_vec(), dk),
        GridTensor::from_parts(vec![cout], db),
    )
}

/// Per-channel mean and biased variance over the batch and spatial axes.
fn batch_moments(x: &GridTensor, n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    acc += x.data()[idx4(c, h, w, ni, ci, hi, wi)];
                }
            }
        }
        mean[ci] = acc / m;
        let mut vacc = 0.0;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let d = x.data()[idx4(c, h, w, ni, ci, hi, wi)] - mean[ci];
                    vacc += d * d;
                }
            }
        }
        var[ci] = vacc / m;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use alloc::vec;

    fn t(shape: &[usize], data: &[f64]) -> GridTensor {
        GridTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    /// Straight-line correlation over all output pixels, groups == 1.
    fn conv_oracle(
        x: &GridTensor,
        k: &GridTensor,
        bias: Option<&GridTensor>,
        spec: ConvSpec,
    ) -> GridTensor {
        let (n, cin, h, w) = x.dims4("oracle").unwrap();
        let (cout, _, kh, kw) = k.dims4("oracle").unwrap();
        let ho = (h + 2 * spec.padding - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (oh * spec.stride + khi * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let iw = (ow * spec.stride + kwi * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [idx4(cin, h, w, ni, ci, ih as usize, iw as usize)]
                                        * k.data()[idx4(cin, kh, kw, co, ci, khi, kwi)];
                                }
                            }
                        }
                        out[idx4(cout, ho, wo, ni, co, oh, ow)] = acc;
                    }
                }
            }
        }
        GridTensor::new(vec![n, cout, ho, wo], out).unwrap()
    }

    fn simple_rng(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    fn random_tensor(shape: &[usize], rng: &mut impl FnMut() -> f64) -> GridTensor {
        let n: usize = shape.iter().product();
        GridTensor::new(shape.to_vec(), (0..n).map(|_| rng()).collect()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]))
            .unwrap();
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, k, None, ConvSpec::plain()).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv_two_by_two_local_sums() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]))
            .unwrap();
        let k = tape.constant(t(&[1, 1, 2, 2], &[1.0; 4])).unwrap();
        let y = tape.conv2d(x, k, None, ConvSpec::plain()).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(GridTensor::zeros(vec![2, 3, 4, 4])).unwrap();
        let k = tape
            .constant(t(&[2, 3, 3, 3], &[0.5; 2 * 3 * 9]))
            .unwrap();
        let b = tape.constant(GridTensor::zeros(vec![2])).unwrap();
        let spec = ConvSpec {
            padding: 1,
            ..ConvSpec::plain()
        };
        let y = tape.conv2d(x, k, Some(b), spec).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_loop_oracle_on_random_configs() {
        let mut rng = simple_rng(11);
        for (stride, dilation, padding) in [(1, 1, 0), (2, 1, 1), (1, 2, 2), (2, 3, 3)] {
            let x = random_tensor(&[2, 3, 9, 8], &mut rng);
            let k = random_tensor(&[4, 3, 3, 3], &mut rng);
            let b = random_tensor(&[4], &mut rng);
            let spec = ConvSpec {
                stride,
                dilation,
                groups: 1,
                padding,
            };
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone()).unwrap();
            let kn = tape.constant(k.clone()).unwrap();
            let bn = tape.constant(b.clone()).unwrap();
            let y = tape.conv2d(xn, kn, Some(bn), spec).unwrap();
            let want = conv_oracle(&x, &k, Some(&b), spec);
            assert_eq!(tape.value(y).shape(), want.shape());
            assert_close(tape.value(y).data(), want.data(), 1e-12);
        }
    }

    #[test]
    fn channelwise_conv_equals_per_channel_oracle() {
        let mut rng = simple_rng(5);
        let x = random_tensor(&[1, 4, 6, 5], &mut rng);
        let k = random_tensor(&[4, 1, 3, 3], &mut rng);
        let spec = ConvSpec {
            stride: 1,
            dilation: 2,
            groups: 4,
            padding: 2,
        };
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone()).unwrap();
        let kn = tape.constant(k.clone()).unwrap();
        let y = tape.conv2d(xn, kn, None, spec).unwrap();
        // Each channel convolved independently with its own 1-input kernel.
        for c in 0..4 {
            let xc = GridTensor::new(
                vec![1, 1, 6, 5],
                (0..30).map(|i| x.data()[c * 30 + i]).collect(),
            )
            .unwrap();
            let kc = GridTensor::new(
                vec![1, 1, 3, 3],
                (0..9).map(|i| k.data()[c * 9 + i]).collect(),
            )
            .unwrap();
            let want = conv_oracle(
                &xc,
                &kc,
                None,
                ConvSpec {
                    groups: 1,
                    ..spec
                },
            );
            let got: Vec<f64> = (0..30).map(|i| tape.value(y).data()[c * 30 + i]).collect();
            assert_close(&got, want.data(), 1e-12);
        }
    }

    #[test]
    fn conv_linearity_in_input() {
        let mut rng = simple_rng(21);
        let x = random_tensor(&[1, 2, 5, 5], &mut rng);
        let y = random_tensor(&[1, 2, 5, 5], &mut rng);
        let k = random_tensor(&[3, 2, 3, 3], &mut rng);
        let spec = ConvSpec {
            padding: 1,
            ..ConvSpec::plain()
        };
        let (alpha, beta) = (0.7, -1.3);
        let run = |input: &GridTensor| {
            let mut tape = Tape::new();
            let xn = tape.constant(input.clone()).unwrap();
            let kn = tape.constant(k.clone()).unwrap();
            let out = tape.conv2d(xn, kn, None, spec).unwrap();
            tape.value(out).clone()
        };
        let combo = x
            .zip(&y, "combo", |a, b| alpha * a + beta * b)
            .unwrap();
        let lhs = run(&combo);
        let cx = run(&x);
        let cy = run(&y);
        let rhs = cx
            .zip(&cy, "combo", |a, b| alpha * a + beta * b)
            .unwrap();
        assert_close(lhs.data(), rhs.data(), 1e-10);
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(GridTensor::zeros(vec![1, 3, 4, 4])).unwrap();
        let k = tape.constant(GridTensor::zeros(vec![2, 2, 3, 3])).unwrap();
        let err = tape.conv2d(x, k, None, ConvSpec::plain()).unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![1, 3, 4, 4]);
                assert_eq!(rhs, vec![2, 2, 3, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let x = tape.constant(GridTensor::zeros(vec![1, 3, 4, 4])).unwrap();
        let k = tape.constant(GridTensor::zeros(vec![1, 3, 3, 3])).unwrap();
        let err = tape
            .conv2d(
                x,
                k,
                None,
                ConvSpec {
                    dilation: 0,
                    ..ConvSpec::plain()
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn batchnorm_constant_input_normalizes_to_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(GridTensor::full(vec![2, 3, 4, 4], 7.5)).unwrap();
        let scale = tape.constant(GridTensor::full(vec![3], 1.0)).unwrap();
        let shift = tape.constant(GridTensor::zeros(vec![3])).unwrap();
        let mut running = RunningStats::fresh(3);
        let y = tape
            .batchnorm2d(
                x,
                scale,
                shift,
                BnForward::Train {
                    running: &mut running,
                    momentum: 0.1,
                },
                1e-5,
            )
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() <= 1e-6));
        // Running stats moved toward the batch: mean 0.9*0 + 0.1*7.5.
        assert_close(&running.mean, &[0.75; 3], 1e-12);
    }

    #[test]
    fn batchnorm_unit_variance_input_is_near_fixed_point() {
        // Zero-mean unit-(biased)-variance per channel input.
        let vals = [-1.0, 1.0, -1.0, 1.0];
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 4], &vals)).unwrap();
        let scale = tape.constant(GridTensor::full(vec![1], 1.0)).unwrap();
        let shift = tape.constant(GridTensor::zeros(vec![1])).unwrap();
        let mut running = RunningStats::fresh(1);
        let eps = 1e-5;
        let y = tape
            .batchnorm2d(
                x,
                scale,
                shift,
                BnForward::Train {
                    running: &mut running,
                    momentum: 0.1,
                },
                eps,
            )
            .unwrap();
        let factor = 1.0 / libm::sqrt(1.0 + eps);
        let want: Vec<f64> = vals.iter().map(|v| v * factor).collect();
        assert_close(tape.value(y).data(), &want, 1e-12);
    }

    #[test]
    fn batchnorm_matches_direct_evaluation() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        let eps = 1e-5;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 4], &vals)).unwrap();
        let scale = tape.constant(GridTensor::full(vec![1], 2.0)).unwrap();
        let shift = tape.constant(GridTensor::full(vec![1], 1.0)).unwrap();
        let mut running = RunningStats::fresh(1);
        let y = tape
            .batchnorm2d(
                x,
                scale,
                shift,
                BnForward::Train {
                    running: &mut running,
                    momentum: 0.1,
                },
                eps,
            )
            .unwrap();
        // Direct evaluation of (x - mean)/sqrt(var + eps) * 2 + 1.
        let mean = 2.5;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let want: Vec<f64> = vals
            .iter()
            .map(|v| (v - mean) / libm::sqrt(var + eps) * 2.0 + 1.0)
            .collect();
        assert_close(tape.value(y).data(), &want, 1e-12);
        // Unbiased variance feeds the running estimate.
        assert_close(&running.var, &[0.9 + 0.1 * var * 4.0 / 3.0], 1e-12);
    }

    #[test]
    fn batchnorm_rejects_empty_and_single_value_batches() {
        let mut tape = Tape::new();
        let x = tape.constant(GridTensor::zeros(vec![1, 2, 0, 4])).unwrap();
        let scale = tape.constant(GridTensor::full(vec![2], 1.0)).unwrap();
        let shift = tape.constant(GridTensor::zeros(vec![2])).unwrap();
        let mut running = RunningStats::fresh(2);
        assert!(tape
            .batchnorm2d(
                x,
                scale,
                shift,
                BnForward::Train {
                    running: &mut running,
                    momentum: 0.1
                },
                1e-5,
            )
            .is_err());
        let x1 = tape.constant(GridTensor::zeros(vec![1, 2, 1, 1])).unwrap();
        assert!(tape
            .batchnorm2d(
                x1,
                scale,
                shift,
                BnForward::Train {
                    running: &mut running,
                    momentum: 0.1
                },
                1e-5,
            )
            .is_err());
    }

    #[test]
    fn relu_and_prelu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        // prelu with slope 0 is relu on any input.
        let x2 = tape.constant(t(&[1, 1, 1, 3], &[-3.0, -0.5, 4.0])).unwrap();
        let zero = tape.constant(GridTensor::zeros(vec![1])).unwrap();
        let p0 = tape.prelu(x2, zero).unwrap();
        let r0 = tape.relu(x2).unwrap();
        assert_eq!(tape.value(p0).data(), tape.value(r0).data());

        let x3 = tape.constant(t(&[1, 1, 1, 2], &[-4.0, 4.0])).unwrap();
        let quarter = tape.constant(GridTensor::full(vec![1], 0.25)).unwrap();
        let p = tape.prelu(x3, quarter).unwrap();
        assert_eq!(tape.value(p).data(), &[-1.0, 4.0]);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(GridTensor::full(vec![2, 3, 4, 5], -2.5)).unwrap();
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 1, 1]);
        assert!(tape.value(y).data().iter().all(|&v| (v + 2.5).abs() < 1e-12));

        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 5.0])).unwrap();
        let m = tape.global_avg_pool(x).unwrap();
        assert_close(tape.value(m).data(), &[2.75], 1e-15);

        // Invariant under spatial permutation.
        let xp = tape.constant(t(&[1, 1, 2, 2], &[5.0, 3.0, 2.0, 1.0])).unwrap();
        let mp = tape.global_avg_pool(xp).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(mp).data());
    }

    /// Scalar reference for the documented half-pixel sampling formula.
    fn upsample_oracle_1d(values: &[f64], factor: usize) -> Vec<f64> {
        let n = values.len();
        (0..n * factor)
            .map(|j| {
                let src = ((j as f64 + 0.5) / factor as f64 - 0.5)
                    .max(0.0)
                    .min((n - 1) as f64);
                let i0 = libm::floor(src) as usize;
                let i1 = (i0 + 1).min(n - 1);
                let t = src - i0 as f64;
                values[i0] * (1.0 - t) + values[i1] * t
            })
            .collect()
    }

    #[test]
    fn upsample_factor_one_is_identity_and_constants_stay_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.upsample_bilinear(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let c = tape.constant(GridTensor::full(vec![1, 2, 3, 3], 4.25)).unwrap();
        let u = tape.upsample_bilinear(c, 3).unwrap();
        assert!(tape.value(u).data().iter().all(|&v| (v - 4.25).abs() < 1e-12));
        assert!(tape.upsample_bilinear(c, 0).is_err());
    }

    #[test]
    fn upsample_two_by_two_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0])).unwrap();
        let y = tape.upsample_bilinear(x, 2).unwrap();
        // Direct evaluation: separable interpolation of rows then columns.
        let rows = upsample_oracle_1d(&[0.0, 2.0], 2); // column 0 values by row
        let mut want = Vec::new();
        for &r in &rows {
            // each source row is [r, r+1]
            want.extend(upsample_oracle_1d(&[r, r + 1.0], 2));
        }
        assert_close(tape.value(y).data(), &want, 1e-14);
        // Frozen golden grid for the chosen convention.
        let golden = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        assert_close(tape.value(y).data(), &golden, 1e-14);
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2, 1, 2], &[1., 2., 3., 4.])).unwrap();
        let empty = tape.constant(GridTensor::zeros(vec![1, 0, 1, 2])).unwrap();
        let same = tape.concat_channels(a, empty).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(a).data());

        let b = tape.constant(GridTensor::full(vec![1, 3, 1, 2], 9.0)).unwrap();
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 1, 2]);
        // Leading channels are bitwise the lhs.
        assert_eq!(&tape.value(y).data()[..4], tape.value(a).data());

        let bad = tape.constant(GridTensor::zeros(vec![1, 1, 2, 2])).unwrap();
        assert!(matches!(
            tape.concat_channels(a, bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let eq = tape.constant(GridTensor::full(vec![3, 2, 2], 1.7)).unwrap();
        let y = tape.softmax_channels(eq).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));

        // Shift invariance per pixel.
        let logits = t(&[3, 1, 1], &[0.3, -1.2, 2.0]);
        let shifted = logits.map(|v| v + 123.456);
        let l1 = tape.constant(logits).unwrap();
        let l2 = tape.constant(shifted).unwrap();
        let s1 = tape.softmax_channels(l1).unwrap();
        let s2 = tape.softmax_channels(l2).unwrap();
        assert_close(tape.value(s1).data(), tape.value(s2).data(), 1e-12);

        // Values for logits (1, 2, 3), against the direct evaluation.
        let l = tape.constant(t(&[3, 1, 1], &[1.0, 2.0, 3.0])).unwrap();
        let s = tape.softmax_channels(l).unwrap();
        let denom = libm::exp(1.0) + libm::exp(2.0) + libm::exp(3.0);
        let want = [
            libm::exp(1.0) / denom,
            libm::exp(2.0) / denom,
            libm::exp(3.0) / denom,
        ];
        assert_close(tape.value(s).data(), &want, 1e-15);
        assert_close(
            tape.value(s).data(),
            &[0.09003057, 0.24472847, 0.66524096],
            1e-8,
        );
        let sum: f64 = tape.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn backward_of_sum_is_ones_and_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, -1.0, 2.0]))
            .unwrap();
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let xv = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let x = tape.param("x", xv.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        let want: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert_close(grads["x"].data(), &want, 1e-14);
    }

    #[test]
    fn backward_requires_scalar_root_and_zeroes_unreached_params() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let _unused = tape.param("unused", GridTensor::full(vec![3], 1.0)).unwrap();
        assert!(tape.backward(x).is_err());
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0; 3]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn repeated_backward_passes_are_identical() {
        let mut rng = simple_rng(3);
        let mut tape = Tape::new();
        let x = tape.param("x", random_tensor(&[1, 2, 4, 4], &mut rng)).unwrap();
        let k = tape.param("k", random_tensor(&[2, 2, 3, 3], &mut rng)).unwrap();
        let spec = ConvSpec {
            padding: 1,
            ..ConvSpec::plain()
        };
        let y = tape.conv2d(x, k, None, spec).unwrap();
        let sig = tape.sigmoid(y).unwrap();
        let s = tape.sum_all(sig).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn division_by_zero_surfaces_as_non_finite() {
        let mut tape = Tape::new();
        let a = tape.constant(GridTensor::full(vec![2], 1.0)).unwrap();
        let b = tape.constant(GridTensor::zeros(vec![2])).unwrap();
        assert!(matches!(tape.div(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn avg_pool_half_averages_quads() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(
                &[1, 1, 2, 4],
                &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            ))
            .unwrap();
        let y = tape.avg_pool_half(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 2]);
        assert_close(tape.value(y).data(), &[3.5, 5.5], 1e-15);
        let odd = tape.constant(GridTensor::zeros(vec![1, 1, 3, 4])).unwrap();
        assert!(tape.avg_pool_half(odd).is_err());
    }

    #[test]
    fn mul_gate_broadcasts_over_space() {
        let mut tape = Tape::new();
        let x = tape.constant(GridTensor::full(vec![1, 2, 2, 2], 3.0)).unwrap();
        let g = tape.constant(t(&[1, 2, 1, 1], &[0.5, 2.0])).unwrap();
        let y = tape.mul_gate(x, g).unwrap();
        assert_close(
            tape.value(y).data(),
            &[1.5, 1.5, 1.5, 1.5, 6.0, 6.0, 6.0, 6.0],
            1e-15,
        );
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let w = tape.constant(t(&[2, 3], &[1., 0., -1., 0.5, 0.5, 0.5])).unwrap();
        let b = tape.constant(t(&[2], &[10.0, -10.0])).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_close(tape.value(y).data(), &[8.0, -7.0, 8.0, -2.5], 1e-14);
    }

    #[test]
    fn sum_channelwise_handles_rank3_and_rank4() {
        let mut tape = Tape::new();
        let x3 = tape.constant(t(&[2, 1, 2], &[1., 2., 10., 20.])).unwrap();
        let s3 = tape.sum_channelwise(x3).unwrap();
        assert_close(tape.value(s3).data(), &[3.0, 30.0], 1e-15);
        let x4 = tape
            .constant(t(&[2, 2, 1, 1], &[1., 2., 3., 4.]))
            .unwrap();
        let s4 = tape.sum_channelwise(x4).unwrap();
        assert_close(tape.value(s4).data(), &[4.0, 6.0], 1e-15);
    }
}
