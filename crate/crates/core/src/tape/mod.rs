//! Reverse-mode autodiff over an eagerly evaluated operation tape.
//!
//! Forward ops execute immediately and record a node; [`Tape::backward`]
//! replays the record in reverse. Leaf gradients accumulate across backward
//! calls until read and cleared by the caller; interior gradients reflect the
//! most recent backward pass.

mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use kernels::conv_out_len;

/// Numerically stable logistic function.
#[inline]
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise nonlinearities available to the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    ReLU,
    Sigmoid,
    SiLU,
    Identity,
}

impl ActivationKind {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            ActivationKind::ReLU => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            ActivationKind::Sigmoid => stable_sigmoid(x),
            ActivationKind::SiLU => x * stable_sigmoid(x),
            ActivationKind::Identity => x,
        }
    }
}

/// Spatial resampling direction for [`Tape::resize_spatial`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeDir {
    UpNearest,
    DownAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

/// Broadcast flavours used by attention and excitation reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BroadcastOp {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum UnaryOp<T> {
    Exp,
    Neg,
    Abs,
    Clamp { lo: T, hi: T },
    AddConst(T),
    MulConst(T),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Conv2d { stride: usize, padding: usize },
    Linear,
    Activation(ActivationKind),
    ChannelStats,
    GlobalAvgPool,
    ConcatChannels,
    Binary(BinaryOp),
    BroadcastSpatial(BroadcastOp),
    BroadcastChannel(BroadcastOp),
    BroadcastScalar(BroadcastOp),
    UpNearest { factor: usize },
    DownAvg { factor: usize },
    SliceChannels { start: usize },
    Gather { indices: Vec<usize> },
    Unary(UnaryOp<T>),
    BceWithLogits { targets: Tensor<T> },
    Reduce(ReduceOp),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear => "linear",
            Op::Activation(ActivationKind::ReLU) => "relu",
            Op::Activation(ActivationKind::Sigmoid) => "sigmoid",
            Op::Activation(ActivationKind::SiLU) => "silu",
            Op::Activation(ActivationKind::Identity) => "identity",
            Op::ChannelStats => "channel_stats",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::ConcatChannels => "concat_channels",
            Op::Binary(_) => "elementwise",
            Op::BroadcastSpatial(_) => "broadcast_spatial",
            Op::BroadcastChannel(_) => "broadcast_channel",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::UpNearest { .. } => "up_nearest",
            Op::DownAvg { .. } => "down_avg",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Gather { .. } => "gather",
            Op::Unary(_) => "unary",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Reduce(ReduceOp::Sum) => "sum",
            Op::Reduce(ReduceOp::Mean) => "mean",
        }
    }
}

/// Handle to a tensor recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: u32,
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Ordered record of executed differentiable operations.
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index as usize >= self.nodes.len() {
            return Err(CoreError::NotOnTape);
        }
        Ok(v.index as usize)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Records a differentiable input (parameter or feature).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    /// Gradient buffer of `v`, if backward has populated one.
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.nodes[self.check(v)?].grad.as_deref())
    }

    /// First node (in execution order) holding a non-finite value, with its
    /// op name. Used for training diagnostics.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs
            .iter()
            .map(|&v| v.index as usize)
            .any(|i| self.nodes[i].requires_grad)
    }

    // ------------------------------------------------------------------
    // forward ops
    // ------------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xi = self.check(input)?;
        let wi = self.check(weight)?;
        if stride == 0 {
            return Err(CoreError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (nb, cin, ih, iw) = self.nodes[xi].value.dims4()?;
        let (cout, wcin, kh, kw) = self.nodes[wi].value.dims4()?;
        if wcin != cin {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "conv2d kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        if ih + 2 * padding < kh || iw + 2 * padding < kw {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                ih + 2 * padding,
                iw + 2 * padding
            )));
        }
        let bias_data = match bias {
            Some(b) => {
                let bi = self.check(b)?;
                let bt = &self.nodes[bi].value;
                if bt.shape() != [cout] {
                    return Err(CoreError::ShapeMismatch(format!(
                        "conv2d: bias shape {:?} != [{cout}]",
                        bt.shape()
                    )));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(
            self.nodes[xi].value.data(),
            (nb, cin, ih, iw),
            self.nodes[wi].value.data(),
            (cout, cin, kh, kw),
            bias_data,
            stride,
            padding,
        );
        let oh = conv_out_len(ih, kh, padding, stride);
        let ow = conv_out_len(iw, kw, padding, stride);
        let value = Tensor::new(&[nb, cout, oh, ow], out)?;
        let mut inputs = vec![input, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let rg = self.any_grad(&inputs);
        Ok(self.push(Op::Conv2d { stride, padding }, inputs, value, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let wi = self.check(weight)?;
        let bi = self.check(bias)?;
        let (nb, din) = self.nodes[xi].value.dims2()?;
        let (dout, wdin) = self.nodes[wi].value.dims2()?;
        if wdin != din || self.nodes[bi].value.shape() != [dout] {
            return Err(CoreError::ShapeMismatch(format!(
                "linear: input [{nb},{din}], weight [{dout},{wdin}], bias {:?}",
                self.nodes[bi].value.shape()
            )));
        }
        let out = kernels::linear_forward(
            self.nodes[xi].value.data(),
            (nb, din),
            self.nodes[wi].value.data(),
            dout,
            self.nodes[bi].value.data(),
        );
        let value = Tensor::new(&[nb, dout], out)?;
        let inputs = vec![input, weight, bias];
        let rg = self.any_grad(&inputs);
        Ok(self.push(Op::Linear, inputs, value, rg))
    }

    pub fn activation(&mut self, input: Var, kind: ActivationKind) -> Result<Var> {
        let xi = self.check(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Activation(kind), vec![input], value, rg))
    }

    pub fn relu(&mut self, v: Var) -> Result<Var> {
        self.activation(v, ActivationKind::ReLU)
    }

    pub fn sigmoid(&mut self, v: Var) -> Result<Var> {
        self.activation(v, ActivationKind::Sigmoid)
    }

    /// Channel-wise mean (out channel 0) and max (out channel 1).
    pub fn channel_stats(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let (nb, c, h, w) = self.nodes[xi].value.dims4()?;
        if c == 0 {
            return Err(CoreError::InvalidArgument(
                "channel_stats requires at least one channel".into(),
            ));
        }
        let out = kernels::channel_stats_forward(self.nodes[xi].value.data(), (nb, c, h, w));
        let value = Tensor::new(&[nb, 2, h, w], out)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::ChannelStats, vec![input], value, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let (nb, c, h, w) = self.nodes[xi].value.dims4()?;
        if h * w == 0 {
            return Err(CoreError::InvalidArgument(
                "global_avg_pool requires a non-empty spatial extent".into(),
            ));
        }
        let x = self.nodes[xi].value.data();
        let plane = h * w;
        let mut out = vec![T::zero(); nb * c];
        for nc in 0..nb * c {
            let mut acc = 0.0f64;
            for &v in &x[nc * plane..(nc + 1) * plane] {
                acc += v.as_f64();
            }
            out[nc] = T::of(acc / plane as f64);
        }
        let value = Tensor::new(&[nb, c], out)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::GlobalAvgPool, vec![input], value, rg))
    }

    /// Channel concatenation; `a`'s channels precede `b`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (na, ca, ha, wa) = self.nodes[ai].value.dims4()?;
        let (nbt, cb, hb, wb) = self.nodes[bi].value.dims4()?;
        if (na, ha, wa) != (nbt, hb, wb) {
            return Err(CoreError::ShapeMismatch(format!(
                "concat_channels: {:?} vs {:?}",
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            )));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity((ca + cb) * na * plane);
        for n in 0..na {
            out.extend_from_slice(&self.nodes[ai].value.data()[n * ca * plane..][..ca * plane]);
            out.extend_from_slice(&self.nodes[bi].value.data()[n * cb * plane..][..cb * plane]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        let inputs = vec![a, b];
        let rg = self.any_grad(&inputs);
        Ok(self.push(Op::ConcatChannels, inputs, value, rg))
    }

    /// Channel sub-range `[start, start+len)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(input)?;
        let (nb, c, h, w) = self.nodes[xi].value.dims4()?;
        if start + len > c {
            return Err(CoreError::InvalidArgument(format!(
                "slice_channels: [{start}, {}) out of {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(nb * len * plane);
        for n in 0..nb {
            let base = (n * c + start) * plane;
            out.extend_from_slice(&self.nodes[xi].value.data()[base..base + len * plane]);
        }
        let value = Tensor::new(&[nb, len, h, w], out)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::SliceChannels { start }, vec![input], value, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "elementwise {:?}: {:?} vs {:?}",
                op,
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            )));
        }
        let av = self.nodes[ai].value.data();
        let bv = self.nodes[bi].value.data();
        let data: Vec<T> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
                BinaryOp::Min => {
                    if y < x {
                        y
                    } else {
                        x
                    }
                }
                BinaryOp::Max => {
                    if y > x {
                        y
                    } else {
                        x
                    }
                }
            })
            .collect();
        let value = Tensor::new(self.nodes[ai].value.shape(), data)?;
        let inputs = vec![a, b];
        let rg = self.any_grad(&inputs);
        Ok(self.push(Op::Binary(op), inputs, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Min)
    }

    pub fn max2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Max)
    }

    /// Elementwise add/mul with the documented broadcast forms: equal shapes,
    /// a spatial map `[N,1,H,W]` over channels, a per-channel vector `[N,C]`
    /// over space, or a single-element scalar tensor.
    pub fn elementwise(&mut self, a: Var, b: Var, op: BroadcastOp) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let ash = self.nodes[ai].value.shape().to_vec();
        let bsh = self.nodes[bi].value.shape().to_vec();
        if ash == bsh {
            return self.binary(
                a,
                b,
                match op {
                    BroadcastOp::Add => BinaryOp::Add,
                    BroadcastOp::Mul => BinaryOp::Mul,
                },
            );
        }
        if bsh == [1] {
            return self.broadcast_scalar(a, b, op);
        }
        if ash.len() == 4 && bsh.len() == 4 && bsh[1] == 1 {
            return self.broadcast_spatial(a, b, op);
        }
        if ash.len() == 4 && bsh.len() == 2 {
            return self.broadcast_channel(a, b, op);
        }
        Err(CoreError::ShapeMismatch(format!(
            "elementwise: cannot broadcast {bsh:?} over {ash:?}"
        )))
    }

    /// `a[N,C,H,W]` combined with a shared spatial map `m[N,1,H,W]`.
    pub fn broadcast_spatial(&mut self, a: Var, m: Var, op: BroadcastOp) -> Result<Var> {
        let ai = self.check(a)?;
        let mi = self.check(m)?;
        let (nb, c, h, w) = self.nodes[ai].value.dims4()?;
        let mdims = self.nodes[mi].value.dims4()?;
        if mdims != (nb, 1, h, w) {
            return Err(CoreError::ShapeMismatch(format!(
                "broadcast_spatial: map {:?} does not match [{nb},1,{h},{w}]",
                self.nodes[mi].value.shape()
            )));
        }
        let plane = h * w;
        let av = self.nodes[ai].value.data();
        let mv = self.nodes[mi].value.data();
        let mut out = vec![T::zero(); av.len()];
        for n in 0..nb {
            let m_plane = &mv[n * plane..][..plane];
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                for p in 0..plane {
                    out[base + p] = match op {
                        BroadcastOp::Add => av[base + p] + m_plane[p],
                        BroadcastOp::Mul => av[base + p] * m_plane[p],
                    };
                }
            }
        }
        let value = Tensor::new(&[nb, c, h, w], out)?;
        let inputs = vec![a, m];
        let rg = self.any_grad(&inputs);
        Ok(self.push(Op::BroadcastSpatial(op), inputs, value, rg))
    }

    /// `a[N,C,H,W]` combined with a per-channel vector `v[N,C]`.
    pub fn broadcast_channel(&mut self, a: Var, vch: Var, op: BroadcastOp) -> Result<Var> {
        let ai = self.check(a)?;
        let vi = self.check(vch)?;
        let (nb, c, h, w) = self.nodes[ai].value.dims4()?;
        if self.nodes[vi].value.dims2()? != (nb, c) {
            return Err(CoreError::ShapeMismatch(format!(
                "broadcast_channel: vector {:?} does not match [{nb},{c}]",
                self.nodes[vi].value.shape()
            )));
        }
        let plane = h * w;
        let av = self.nodes[ai].value.data();
        let vv = self.nodes[vi].value.data();
        let mut out = vec![T::zero(); av.len()];
        for nc in 0..nb * c {
            let s = vv[nc];
            let base = nc * plane;
            for p in 0..plane {
                out[base + p] = match op {
                    BroadcastOp::Add => av[base + p] + s,
                    BroadcastOp::Mul => av[base + p] * s,
                };
            }
        }
        let value = Tensor::new(&[nb, c, h, w], out)?;
        let inputs = vec![a, vch];
        let rg = self.any_grad(&inputs);
        Ok(self.push(Op::BroadcastChannel(op), inputs, value, rg))
    }

    /// `a` combined with a single-element tensor `s` (learnable scalar).
    pub fn broadcast_scalar(&mut self, a: Var, s: Var, op: BroadcastOp) -> Result<Var> {
        let ai = self.check(a)?;
        let si = self.check(s)?;
        if self.nodes[si].value.numel() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "broadcast_scalar: expected a [1] tensor, got {:?}",
                self.nodes[si].value.shape()
            )));
        }
        let sv = self.nodes[si].value.data()[0];
        let data: Vec<T> = self.nodes[ai]
            .value
            .data()
            .iter()
            .map(|&x| match op {
                BroadcastOp::Add => x + sv,
                BroadcastOp::Mul => x * sv,
            })
            .collect();
        let value = Tensor::new(self.nodes[ai].value.shape(), data)?;
        let inputs = vec![a, s];
        let rg = self.any_grad(&inputs);
        Ok(self.push(Op::BroadcastScalar(op), inputs, value, rg))
    }

    /// Integer-factor spatial resampling: nearest-neighbour up, block-average
    /// down. `factor == 1` is the identity either way.
    pub fn resize_spatial(&mut self, input: Var, factor: usize, dir: ResizeDir) -> Result<Var> {
        let xi = self.check(input)?;
        if factor == 0 {
            return Err(CoreError::InvalidArgument("resize factor must be >= 1".into()));
        }
        let (nb, c, h, w) = self.nodes[xi].value.dims4()?;
        let rg = self.nodes[xi].requires_grad;
        match dir {
            ResizeDir::UpNearest => {
                let out = kernels::upsample_nearest(self.nodes[xi].value.data(), (nb, c, h, w), factor);
                let value = Tensor::new(&[nb, c, h * factor, w * factor], out)?;
                Ok(self.push(Op::UpNearest { factor }, vec![input], value, rg))
            }
            ResizeDir::DownAvg => {
                if h % factor != 0 || w % factor != 0 {
                    return Err(CoreError::InvalidArgument(format!(
                        "down_avg: {h}x{w} not divisible by {factor}"
                    )));
                }
                let out = kernels::downsample_avg(self.nodes[xi].value.data(), (nb, c, h, w), factor);
                let value = Tensor::new(&[nb, c, h / factor, w / factor], out)?;
                Ok(self.push(Op::DownAvg { factor }, vec![input], value, rg))
            }
        }
    }

    /// Gathers flat elements of `input` into a rank-1 tensor; backward
    /// scatter-adds.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>) -> Result<Var> {
        let xi = self.check(input)?;
        let x = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(indices.len());
        for &idx in &indices {
            let v = x.get(idx).ok_or_else(|| {
                CoreError::InvalidArgument(format!("gather index {idx} out of {}", x.len()))
            })?;
            out.push(*v);
        }
        let value = Tensor::new(&[indices.len()], out)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Gather { indices }, vec![input], value, rg))
    }

    fn unary(&mut self, input: Var, op: UnaryOp<T>) -> Result<Var> {
        let xi = self.check(input)?;
        let data: Vec<T> = self.nodes[xi]
            .value
            .data()
            .iter()
            .map(|&x| match op {
                UnaryOp::Exp => x.exp(),
                UnaryOp::Neg => -x,
                UnaryOp::Abs => x.abs(),
                UnaryOp::Clamp { lo, hi } => {
                    if x < lo {
                        lo
                    } else if x > hi {
                        hi
                    } else {
                        x
                    }
                }
                UnaryOp::AddConst(c) => x + c,
                UnaryOp::MulConst(c) => x * c,
            })
            .collect();
        let value = Tensor::new(self.nodes[xi].value.shape(), data)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Unary(op), vec![input], value, rg))
    }

    pub fn exp(&mut self, v: Var) -> Result<Var> {
        self.unary(v, UnaryOp::Exp)
    }

    pub fn neg(&mut self, v: Var) -> Result<Var> {
        self.unary(v, UnaryOp::Neg)
    }

    pub fn abs(&mut self, v: Var) -> Result<Var> {
        self.unary(v, UnaryOp::Abs)
    }

    pub fn clamp(&mut self, v: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(CoreError::InvalidArgument("clamp: lo > hi".into()));
        }
        self.unary(v, UnaryOp::Clamp { lo, hi })
    }

    pub fn add_const(&mut self, v: Var, c: T) -> Result<Var> {
        self.unary(v, UnaryOp::AddConst(c))
    }

    pub fn mul_const(&mut self, v: Var, c: T) -> Result<Var> {
        self.unary(v, UnaryOp::MulConst(c))
    }

    /// Per-element binary cross-entropy on logits against fixed targets:
    /// `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let xi = self.check(logits)?;
        if targets.shape() != self.nodes[xi].value.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "bce_with_logits: targets {:?} vs logits {:?}",
                targets.shape(),
                self.nodes[xi].value.shape()
            )));
        }
        let data: Vec<T> = self.nodes[xi]
            .value
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| {
                let pos = if x > T::zero() { x } else { T::zero() };
                pos - x * t + (-x.abs()).exp().ln_1p()
            })
            .collect();
        let value = Tensor::new(targets.shape(), data)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::BceWithLogits { targets }, vec![logits], value, rg))
    }

    fn reduce(&mut self, input: Var, op: ReduceOp) -> Result<Var> {
        let xi = self.check(input)?;
        let x = self.nodes[xi].value.data();
        if x.is_empty() {
            return Err(CoreError::InvalidArgument("cannot reduce an empty tensor".into()));
        }
        let mut acc = 0.0f64;
        for &v in x {
            acc += v.as_f64();
        }
        if op == ReduceOp::Mean {
            acc /= x.len() as f64;
        }
        let value = Tensor::scalar(T::of(acc));
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Reduce(op), vec![input], value, rg))
    }

    pub fn sum(&mut self, v: Var) -> Result<Var> {
        self.reduce(v, ReduceOp::Sum)
    }

    pub fn mean(&mut self, v: Var) -> Result<Var> {
        self.reduce(v, ReduceOp::Mean)
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; interior gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let idx = self.check(loss)?;
        let numel = self.nodes[idx].value.numel();
        if numel != 1 {
            return Err(CoreError::NonScalarLoss(numel));
        }
        let mut scratch: Vec<Option<Vec<T>>> = vec![None; idx + 1];
        scratch[idx] = Some(vec![T::one()]);
        for i in (0..=idx).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut scratch)?;
            }
            scratch[i] = Some(g);
        }
        for (i, slot) in scratch.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            let node = &mut self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => node.grad = Some(g),
                },
                _ => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn input_value(&self, node: usize, slot: usize) -> &Tensor<T> {
        let v = self.nodes[node].inputs[slot];
        &self.nodes[v.index as usize].value
    }

    fn input_needs_grad(&self, node: usize, slot: usize) -> bool {
        let v = self.nodes[node].inputs[slot];
        self.nodes[v.index as usize].requires_grad
    }

    fn add_grad(&self, scratch: &mut [Option<Vec<T>>], node: usize, slot: usize, add: &[T]) {
        let v = self.nodes[node].inputs[slot];
        let entry =
            scratch[v.index as usize].get_or_insert_with(|| vec![T::zero(); add.len()]);
        for (a, b) in entry.iter_mut().zip(add) {
            *a += *b;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &[T], scratch: &mut [Option<Vec<T>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d { stride, padding } => {
                let x = self.input_value(i, 0);
                let w = self.input_value(i, 1);
                let has_bias = self.nodes[i].inputs.len() == 3;
                let (gx, gw, gb) = kernels::conv2d_backward(
                    x.data(),
                    x.dims4()?,
                    w.data(),
                    w.dims4()?,
                    g,
                    *stride,
                    *padding,
                    self.input_needs_grad(i, 0),
                    self.input_needs_grad(i, 1),
                    has_bias && self.input_needs_grad(i, 2),
                );
                if let Some(gx) = gx {
                    self.add_grad(scratch, i, 0, &gx);
                }
                if let Some(gw) = gw {
                    self.add_grad(scratch, i, 1, &gw);
                }
                if let Some(gb) = gb {
                    self.add_grad(scratch, i, 2, &gb);
                }
            }
            Op::Linear => {
                let x = self.input_value(i, 0);
                let w = self.input_value(i, 1);
                let (nb, din) = x.dims2()?;
                let (dout, _) = w.dims2()?;
                let (gx, gw, gb) =
                    kernels::linear_backward(x.data(), (nb, din), w.data(), dout, g);
                if self.input_needs_grad(i, 0) {
                    self.add_grad(scratch, i, 0, &gx);
                }
                if self.input_needs_grad(i, 1) {
                    self.add_grad(scratch, i, 1, &gw);
                }
                if self.input_needs_grad(i, 2) {
                    self.add_grad(scratch, i, 2, &gb);
                }
            }
            Op::Activation(kind) => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0).data();
                    let y = self.nodes[i].value.data();
                    let gx: Vec<T> = match kind {
                        ActivationKind::ReLU => g
                            .iter()
                            .zip(x)
                            .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                            .collect(),
                        ActivationKind::Sigmoid => g
                            .iter()
                            .zip(y)
                            .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                            .collect(),
                        ActivationKind::SiLU => g
                            .iter()
                            .zip(x)
                            .map(|(&gv, &xv)| {
                                let s = stable_sigmoid(xv);
                                gv * s * (T::one() + xv * (T::one() - s))
                            })
                            .collect(),
                        ActivationKind::Identity => g.to_vec(),
                    };
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::ChannelStats => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0);
                    let gx = kernels::channel_stats_backward(x.data(), x.dims4()?, g);
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::GlobalAvgPool => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0);
                    let (nb, c, h, w) = x.dims4()?;
                    let plane = h * w;
                    let inv = T::of(1.0 / plane as f64);
                    let mut gx = vec![T::zero(); x.numel()];
                    for nc in 0..nb * c {
                        let gv = g[nc] * inv;
                        for p in 0..plane {
                            gx[nc * plane + p] = gv;
                        }
                    }
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::ConcatChannels => {
                let (na, ca, ha, wa) = self.input_value(i, 0).dims4()?;
                let cb = self.input_value(i, 1).shape()[1];
                let plane = ha * wa;
                if self.input_needs_grad(i, 0) {
                    let mut ga = vec![T::zero(); na * ca * plane];
                    for n in 0..na {
                        let src = n * (ca + cb) * plane;
                        ga[n * ca * plane..(n + 1) * ca * plane]
                            .copy_from_slice(&g[src..src + ca * plane]);
                    }
                    self.add_grad(scratch, i, 0, &ga);
                }
                if self.input_needs_grad(i, 1) {
                    let mut gb = vec![T::zero(); na * cb * plane];
                    for n in 0..na {
                        let src = n * (ca + cb) * plane + ca * plane;
                        gb[n * cb * plane..(n + 1) * cb * plane]
                            .copy_from_slice(&g[src..src + cb * plane]);
                    }
                    self.add_grad(scratch, i, 1, &gb);
                }
            }
            Op::Binary(op) => {
                let a = self.input_value(i, 0).data();
                let b = self.input_value(i, 1).data();
                let y = self.nodes[i].value.data();
                if self.input_needs_grad(i, 0) {
                    let ga: Vec<T> = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect(),
                        BinaryOp::Div => g.iter().zip(b).map(|(&gv, &bv)| gv / bv).collect(),
                        BinaryOp::Min => g
                            .iter()
                            .zip(a.iter().zip(b))
                            .map(|(&gv, (&av, &bv))| if av <= bv { gv } else { T::zero() })
                            .collect(),
                        BinaryOp::Max => g
                            .iter()
                            .zip(a.iter().zip(b))
                            .map(|(&gv, (&av, &bv))| if av >= bv { gv } else { T::zero() })
                            .collect(),
                    };
                    self.add_grad(scratch, i, 0, &ga);
                }
                if self.input_needs_grad(i, 1) {
                    let gb: Vec<T> = match op {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|&gv| -gv).collect(),
                        BinaryOp::Mul => g.iter().zip(a).map(|(&gv, &av)| gv * av).collect(),
                        BinaryOp::Div => g
                            .iter()
                            .zip(y.iter().zip(b))
                            .map(|(&gv, (&yv, &bv))| -gv * yv / bv)
                            .collect(),
                        BinaryOp::Min => g
                            .iter()
                            .zip(a.iter().zip(b))
                            .map(|(&gv, (&av, &bv))| if bv < av { gv } else { T::zero() })
                            .collect(),
                        BinaryOp::Max => g
                            .iter()
                            .zip(a.iter().zip(b))
                            .map(|(&gv, (&av, &bv))| if bv > av { gv } else { T::zero() })
                            .collect(),
                    };
                    self.add_grad(scratch, i, 1, &gb);
                }
            }
            Op::BroadcastSpatial(op) => {
                let a = self.input_value(i, 0);
                let (nb, c, h, w) = a.dims4()?;
                let plane = h * w;
                let m = self.input_value(i, 1).data();
                if self.input_needs_grad(i, 0) {
                    let ga: Vec<T> = match op {
                        BroadcastOp::Add => g.to_vec(),
                        BroadcastOp::Mul => {
                            let mut ga = vec![T::zero(); g.len()];
                            for n in 0..nb {
                                for ch in 0..c {
                                    let base = (n * c + ch) * plane;
                                    for p in 0..plane {
                                        ga[base + p] = g[base + p] * m[n * plane + p];
                                    }
                                }
                            }
                            ga
                        }
                    };
                    self.add_grad(scratch, i, 0, &ga);
                }
                if self.input_needs_grad(i, 1) {
                    let av = a.data();
                    let mut gm = vec![T::zero(); nb * plane];
                    for n in 0..nb {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            for p in 0..plane {
                                gm[n * plane + p] += match op {
                                    BroadcastOp::Add => g[base + p],
                                    BroadcastOp::Mul => g[base + p] * av[base + p],
                                };
                            }
                        }
                    }
                    self.add_grad(scratch, i, 1, &gm);
                }
            }
            Op::BroadcastChannel(op) => {
                let a = self.input_value(i, 0);
                let (nb, c, h, w) = a.dims4()?;
                let plane = h * w;
                let vch = self.input_value(i, 1).data();
                if self.input_needs_grad(i, 0) {
                    let ga: Vec<T> = match op {
                        BroadcastOp::Add => g.to_vec(),
                        BroadcastOp::Mul => {
                            let mut ga = vec![T::zero(); g.len()];
                            for nc in 0..nb * c {
                                let s = vch[nc];
                                for p in 0..plane {
                                    ga[nc * plane + p] = g[nc * plane + p] * s;
                                }
                            }
                            ga
                        }
                    };
                    self.add_grad(scratch, i, 0, &ga);
                }
                if self.input_needs_grad(i, 1) {
                    let av = a.data();
                    let mut gv = vec![T::zero(); nb * c];
                    for nc in 0..nb * c {
                        let mut acc = 0.0f64;
                        for p in 0..plane {
                            acc += match op {
                                BroadcastOp::Add => g[nc * plane + p].as_f64(),
                                BroadcastOp::Mul => {
                                    (g[nc * plane + p] * av[nc * plane + p]).as_f64()
                                }
                            };
                        }
                        gv[nc] = T::of(acc);
                    }
                    self.add_grad(scratch, i, 1, &gv);
                }
            }
            Op::BroadcastScalar(op) => {
                let a = self.input_value(i, 0).data();
                let s = self.input_value(i, 1).data()[0];
                if self.input_needs_grad(i, 0) {
                    let ga: Vec<T> = match op {
                        BroadcastOp::Add => g.to_vec(),
                        BroadcastOp::Mul => g.iter().map(|&gv| gv * s).collect(),
                    };
                    self.add_grad(scratch, i, 0, &ga);
                }
                if self.input_needs_grad(i, 1) {
                    let mut acc = 0.0f64;
                    match op {
                        BroadcastOp::Add => {
                            for &gv in g {
                                acc += gv.as_f64();
                            }
                        }
                        BroadcastOp::Mul => {
                            for (&gv, &av) in g.iter().zip(a) {
                                acc += (gv * av).as_f64();
                            }
                        }
                    }
                    self.add_grad(scratch, i, 1, &[T::of(acc)]);
                }
            }
            Op::UpNearest { factor } => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0);
                    let gx = kernels::upsample_nearest_backward(x.dims4()?, *factor, g);
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::DownAvg { factor } => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0);
                    let gx = kernels::downsample_avg_backward(x.dims4()?, *factor, g);
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::SliceChannels { start } => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0);
                    let (nb, c, h, w) = x.dims4()?;
                    let len = self.nodes[i].value.shape()[1];
                    let plane = h * w;
                    let mut gx = vec![T::zero(); x.numel()];
                    for n in 0..nb {
                        let dst = (n * c + start) * plane;
                        gx[dst..dst + len * plane]
                            .copy_from_slice(&g[n * len * plane..(n + 1) * len * plane]);
                    }
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::Gather { indices } => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0);
                    let mut gx = vec![T::zero(); x.numel()];
                    for (p, &idx) in indices.iter().enumerate() {
                        gx[idx] += g[p];
                    }
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::Unary(op) => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0).data();
                    let y = self.nodes[i].value.data();
                    let gx: Vec<T> = match op {
                        UnaryOp::Exp => g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect(),
                        UnaryOp::Neg => g.iter().map(|&gv| -gv).collect(),
                        UnaryOp::Abs => g
                            .iter()
                            .zip(x)
                            .map(|(&gv, &xv)| {
                                if xv > T::zero() {
                                    gv
                                } else if xv < T::zero() {
                                    -gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                        UnaryOp::Clamp { lo, hi } => g
                            .iter()
                            .zip(x)
                            .map(|(&gv, &xv)| {
                                if xv >= *lo && xv <= *hi {
                                    gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                        UnaryOp::AddConst(_) => g.to_vec(),
                        UnaryOp::MulConst(c) => g.iter().map(|&gv| gv * *c).collect(),
                    };
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::BceWithLogits { targets } => {
                if self.input_needs_grad(i, 0) {
                    let x = self.input_value(i, 0).data();
                    let gx: Vec<T> = g
                        .iter()
                        .zip(x.iter().zip(targets.data()))
                        .map(|(&gv, (&xv, &tv))| gv * (stable_sigmoid(xv) - tv))
                        .collect();
                    self.add_grad(scratch, i, 0, &gx);
                }
            }
            Op::Reduce(op) => {
                if self.input_needs_grad(i, 0) {
                    let n = self.input_value(i, 0).numel();
                    let gv = match op {
                        ReduceOp::Sum => g[0],
                        ReduceOp::Mean => g[0] * T::of(1.0 / n as f64),
                    };
                    self.add_grad(scratch, i, 0, &vec![gv; n]);
                }
            }
        }
        Ok(())
    }
}
