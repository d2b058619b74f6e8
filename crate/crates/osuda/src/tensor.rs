//! Dense f64 tensors on a gradient tape.
//!
//! A [`Tape`] owns every tensor created through it. Ops push a node and
//! return a [`Val`] handle; [`Tape::backward`] walks the recorded ops once
//! in reverse and fills `grad` on every `requires_grad` ancestor. A tape
//! supports exactly one backward pass (one optimization step per graph).
//!
//! Shape rules are deliberately strict: binary ops require identical
//! shapes, and the only broadcast is a per-channel vector over the spatial
//! dims of a (C,H,W) tensor. Everything is 64-bit; there is no f32 mode.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Val(usize);

/// Dense row-major f64 tensor. `grad` is populated only by a backward pass.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (C,H,W) accessor for tests and detached pipelines.
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    pub(crate) fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::Invalid(format!(
                "{op} expects a (C,H,W) tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Nearest-neighbor spatial upsample by an integer factor; forward
    /// only, used when lifting f4-resolution predictions to label
    /// resolution. Each cell is replicated over a factor x factor block.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::Invalid("upsample factor must be >= 1".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                let src = (ci * h + y / factor) * w;
                let dst = (ci * oh + y) * ow;
                for x in 0..ow {
                    out[dst + x] = self.data[src + x / factor];
                }
            }
        }
        Tensor::new(vec![c, oh, ow], out)
    }

    /// Per-position argmax over the channel axis of a (C,H,W) tensor;
    /// ties resolve to the lowest class index.
    pub fn argmax_channels(&self) -> Result<Vec<u8>> {
        let (c, h, w) = self.chw("argmax_channels")?;
        let hw = h * w;
        let mut out = vec![0u8; hw];
        for (pos, slot) in out.iter_mut().enumerate() {
            let mut best = self.data[pos];
            let mut arg = 0usize;
            for ci in 1..c {
                let v = self.data[ci * hw + pos];
                if v > best {
                    best = v;
                    arg = ci;
                }
            }
            *slot = arg as u8;
        }
        Ok(out)
    }
}

enum Op {
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    AddScalar(Val),
    MulScalar(Val, f64),
    ClampMin(Val, f64),
    Relu(Val),
    Ln(Val),
    Sqrt(Val),
    /// Softmax over the channel axis (axis 0), independently per position.
    SoftmaxCh(Val),
    /// (C,H,W) -> (C,) spatial mean.
    ChannelMean(Val),
    /// (C,) -> (C,H,W) replication over spatial dims.
    ChannelBroadcast(Val),
    SumAll(Val),
    MeanAll(Val),
    Reshape(Val),
    Conv2d {
        x: Val,
        w: Val,
        b: Val,
        stride: usize,
        pad: usize,
    },
}

pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
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
            nodes: Vec::new(),
            ops: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, t: Tensor, op: Op) -> Val {
        self.nodes.push(t);
        self.ops.push(op);
        Val(self.nodes.len() - 1)
    }

    /// Leaf that gradients flow into (a trainable parameter).
    pub fn param(&mut self, mut t: Tensor) -> Val {
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Leaf treated as a constant (inputs, labels, detached values).
    pub fn constant(&mut self, mut t: Tensor) -> Val {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn tensor(&self, v: Val) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn data(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward's loss w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Number of trainable leaves on the tape — the optimizer's parameter
    /// count. Style mixing must never change this.
    pub fn param_leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .zip(&self.ops)
            .filter(|(n, op)| n.requires_grad && matches!(op, Op::Leaf))
            .count()
    }

    /// Detached copy of a node's current value.
    pub fn detach(&self, v: Val) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn requires(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Val, b: Val) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Val> {
        self.same_shape(op_name, a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let mut t = Tensor::new(self.nodes[a.0].shape.clone(), data)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, op))
    }

    fn unary(&mut self, a: Val, f: impl Fn(f64) -> f64, op: Op) -> Val {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let t = Tensor {
            shape: self.nodes[a.0].shape.clone(),
            data,
            requires_grad: self.requires(a),
            grad: None,
        };
        self.push(t, op)
    }

    // ---- forward ops -------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Val, s: f64) -> Val {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Val, s: f64) -> Val {
        self.unary(a, move |x| x * s, Op::MulScalar(a, s))
    }

    /// max(x, floor); gradient passes only where x > floor.
    pub fn clamp_min(&mut self, a: Val, floor: f64) -> Val {
        self.unary(a, move |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn relu(&mut self, a: Val) -> Val {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn ln(&mut self, a: Val) -> Val {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Val) -> Val {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Softmax over axis 0, independently at every trailing position.
    /// Max-subtracted for stability.
    pub fn softmax_channels(&mut self, a: Val) -> Result<Val> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::Invalid(format!(
                "softmax_channels needs a leading channel axis, got shape {shape:?}"
            )));
        }
        let c = shape[0];
        let inner = self.nodes[a.0].data.len() / c;
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; x.len()];
        for j in 0..inner {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[ci * inner + j]);
            }
            let mut s = 0.0;
            for ci in 0..c {
                let e = (x[ci * inner + j] - m).exp();
                out[ci * inner + j] = e;
                s += e;
            }
            for ci in 0..c {
                out[ci * inner + j] /= s;
            }
        }
        let mut t = Tensor::new(shape, out)?;
        t.requires_grad = self.requires(a);
        Ok(self.push(t, Op::SoftmaxCh(a)))
    }

    /// Per-channel mean over the spatial dims: (C,H,W) -> (C,).
    pub fn channel_mean(&mut self, a: Val) -> Result<Val> {
        let (c, h, w) = self.nodes[a.0].chw("channel_mean")?;
        if h * w == 0 {
            return Err(Error::Invalid("channel_mean over empty spatial extent".into()));
        }
        let hw = h * w;
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; c];
        for (ci, slot) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for &v in &x[ci * hw..(ci + 1) * hw] {
                s += v;
            }
            *slot = s / hw as f64;
        }
        let mut t = Tensor::new(vec![c], out)?;
        t.requires_grad = self.requires(a);
        Ok(self.push(t, Op::ChannelMean(a)))
    }

    /// (C,) -> (C,H,W): the one permitted broadcast.
    pub fn channel_broadcast(&mut self, a: Val, h: usize, w: usize) -> Result<Val> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 1 {
            return Err(Error::Invalid(format!(
                "channel_broadcast expects a (C,) vector, got shape {shape:?}"
            )));
        }
        let c = shape[0];
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ci in 0..c {
            let v = self.nodes[a.0].data[ci];
            out[ci * hw..(ci + 1) * hw].fill(v);
        }
        let mut t = Tensor::new(vec![c, h, w], out)?;
        t.requires_grad = self.requires(a);
        Ok(self.push(t, Op::ChannelBroadcast(a)))
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let mut t = Tensor::scalar(s);
        t.requires_grad = self.requires(a);
        self.push(t, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Val) -> Result<Val> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(Error::Invalid("mean_all of an empty tensor".into()));
        }
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let mut t = Tensor::scalar(s / n as f64);
        t.requires_grad = self.requires(a);
        Ok(self.push(t, Op::MeanAll(a)))
    }

    pub fn reshape(&mut self, a: Val, shape: Vec<usize>) -> Result<Val> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.nodes[a.0].shape.clone(),
                right: shape,
            });
        }
        let mut t = Tensor::new(shape, self.nodes[a.0].data.clone())?;
        t.requires_grad = self.requires(a);
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// 2-D convolution with zero padding.
    /// x: (Cin,H,W), w: (Cout,Cin,Kh,Kw), b: (Cout,).
    pub fn conv2d(&mut self, x: Val, w: Val, b: Val, stride: usize, pad: usize) -> Result<Val> {
        let (cin, h, win) = self.nodes[x.0].chw("conv2d input")?;
        let ws = &self.nodes[w.0].shape;
        if ws.len() != 4 {
            return Err(Error::Invalid(format!(
                "conv2d kernel must be (Cout,Cin,Kh,Kw), got shape {ws:?}"
            )));
        }
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel-vs-input channels",
                left: ws.clone(),
                right: self.nodes[x.0].shape.clone(),
            });
        }
        if self.nodes[b.0].shape != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: self.nodes[b.0].shape.clone(),
                right: vec![cout],
            });
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || win + 2 * pad < kw {
            return Err(Error::Invalid(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                win + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;

        let out = conv_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            ConvDims {
                cin,
                h,
                w: win,
                cout,
                kh,
                kw,
                ho,
                wo,
                stride,
                pad,
            },
        );
        let mut t = Tensor::new(vec![cout, ho, wo], out)?;
        t.requires_grad = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar loss. Fills `grad` on every
    /// `requires_grad` ancestor; consumes the tape (second call errors).
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // constant graph: nothing to fill
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let contribs = self.local_grads(idx);
            for (v, c) in contribs {
                let node = &mut self.nodes[v.0];
                match node.grad.as_mut() {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(&c) {
                            *gi += ci;
                        }
                    }
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to each of its inputs that
    /// requires grad. Read-only over the tape; accumulation happens in
    /// `backward`.
    fn local_grads(&self, idx: usize) -> Vec<(Val, Vec<f64>)> {
        let g = self.nodes[idx].grad.as_deref().expect("checked by caller");
        let mut out: Vec<(Val, Vec<f64>)> = Vec::new();
        let mut emit = |v: Val, c: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                out.push((v, c));
            }
        };
        match self.ops[idx] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                emit(a, g.iter().zip(db).map(|(&gv, &bv)| gv * bv).collect());
                emit(b, g.iter().zip(da).map(|(&gv, &av)| gv * av).collect());
            }
            Op::Div(a, b) => {
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                emit(a, g.iter().zip(db).map(|(&gv, &bv)| gv / bv).collect());
                emit(
                    b,
                    g.iter()
                        .zip(da.iter().zip(db))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect(),
                );
            }
            Op::AddScalar(a) => emit(a, g.to_vec()),
            Op::MulScalar(a, s) => emit(a, g.iter().map(|&v| v * s).collect()),
            Op::ClampMin(a, floor) => {
                let da = &self.nodes[a.0].data;
                emit(
                    a,
                    g.iter()
                        .zip(da)
                        .map(|(&gv, &x)| if x > floor { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let da = &self.nodes[a.0].data;
                emit(
                    a,
                    g.iter()
                        .zip(da)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Ln(a) => {
                let da = &self.nodes[a.0].data;
                emit(a, g.iter().zip(da).map(|(&gv, &x)| gv / x).collect());
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].data;
                emit(a, g.iter().zip(y).map(|(&gv, &yv)| gv * 0.5 / yv).collect());
            }
            Op::SoftmaxCh(a) => {
                let y = &self.nodes[idx].data;
                let c = self.nodes[idx].shape[0];
                let inner = y.len() / c;
                let mut dx = vec![0.0; y.len()];
                for j in 0..inner {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += g[ci * inner + j] * y[ci * inner + j];
                    }
                    for ci in 0..c {
                        let k = ci * inner + j;
                        dx[k] = y[k] * (g[k] - dot);
                    }
                }
                emit(a, dx);
            }
            Op::ChannelMean(a) => {
                let (c, h, w) = (
                    self.nodes[a.0].shape[0],
                    self.nodes[a.0].shape[1],
                    self.nodes[a.0].shape[2],
                );
                let hw = h * w;
                let mut dx = vec![0.0; c * hw];
                for ci in 0..c {
                    let gv = g[ci] / hw as f64;
                    dx[ci * hw..(ci + 1) * hw].fill(gv);
                }
                emit(a, dx);
            }
            Op::ChannelBroadcast(a) => {
                let c = self.nodes[a.0].shape[0];
                let hw = self.nodes[idx].data.len() / c;
                let mut dx = vec![0.0; c];
                for (ci, slot) in dx.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for &gv in &g[ci * hw..(ci + 1) * hw] {
                        s += gv;
                    }
                    *slot = s;
                }
                emit(a, dx);
            }
            Op::SumAll(a) => {
                emit(a, vec![g[0]; self.nodes[a.0].data.len()]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].data.len();
                emit(a, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => emit(a, g.to_vec()),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let dims = ConvDims {
                    cin: self.nodes[x.0].shape[0],
                    h: self.nodes[x.0].shape[1],
                    w: self.nodes[x.0].shape[2],
                    cout: self.nodes[w.0].shape[0],
                    kh: self.nodes[w.0].shape[2],
                    kw: self.nodes[w.0].shape[3],
                    ho: self.nodes[idx].shape[1],
                    wo: self.nodes[idx].shape[2],
                    stride,
                    pad,
                };
                if self.nodes[x.0].requires_grad {
                    emit(x, conv_backward_input(g, &self.nodes[w.0].data, dims));
                }
                if self.nodes[w.0].requires_grad {
                    emit(w, conv_backward_weight(g, &self.nodes[x.0].data, dims));
                }
                if self.nodes[b.0].requires_grad {
                    emit(b, conv_backward_bias(g, dims));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// Output range [lo, hi) such that o*stride + k - pad lies in [0, extent).
fn valid_range(extent: usize, out_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if extent + pad <= k {
        return (0, 0);
    }
    let hi = ((extent + pad - k - 1) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.cout * d.ho * d.wo];
    for oc in 0..d.cout {
        out[oc * d.ho * d.wo..(oc + 1) * d.ho * d.wo].fill(b[oc]);
    }
    for oc in 0..d.cout {
        for ic in 0..d.cin {
            for ky in 0..d.kh {
                let (ylo, yhi) = valid_range(d.h, d.ho, ky, d.stride, d.pad);
                for kx in 0..d.kw {
                    let wv = w[((oc * d.cin + ic) * d.kh + ky) * d.kw + kx];
                    let (xlo, xhi) = valid_range(d.w, d.wo, kx, d.stride, d.pad);
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - d.pad;
                        let xrow = (ic * d.h + iy) * d.w;
                        let orow = (oc * d.ho + oy) * d.wo;
                        for ox in xlo..xhi {
                            let ix = ox * d.stride + kx - d.pad;
                            out[orow + ox] += wv * x[xrow + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let mut dx = vec![0.0; d.cin * d.h * d.w];
    for oc in 0..d.cout {
        for ic in 0..d.cin {
            for ky in 0..d.kh {
                let (ylo, yhi) = valid_range(d.h, d.ho, ky, d.stride, d.pad);
                for kx in 0..d.kw {
                    let wv = w[((oc * d.cin + ic) * d.kh + ky) * d.kw + kx];
                    let (xlo, xhi) = valid_range(d.w, d.wo, kx, d.stride, d.pad);
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - d.pad;
                        let xrow = (ic * d.h + iy) * d.w;
                        let orow = (oc * d.ho + oy) * d.wo;
                        for ox in xlo..xhi {
                            let ix = ox * d.stride + kx - d.pad;
                            dx[xrow + ix] += wv * g[orow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_weight(g: &[f64], x: &[f64], d: ConvDims) -> Vec<f64> {
    let mut dw = vec![0.0; d.cout * d.cin * d.kh * d.kw];
    for oc in 0..d.cout {
        for ic in 0..d.cin {
            for ky in 0..d.kh {
                let (ylo, yhi) = valid_range(d.h, d.ho, ky, d.stride, d.pad);
                for kx in 0..d.kw {
                    let (xlo, xhi) = valid_range(d.w, d.wo, kx, d.stride, d.pad);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - d.pad;
                        let xrow = (ic * d.h + iy) * d.w;
                        let orow = (oc * d.ho + oy) * d.wo;
                        for ox in xlo..xhi {
                            let ix = ox * d.stride + kx - d.pad;
                            acc += g[orow + ox] * x[xrow + ix];
                        }
                    }
                    dw[((oc * d.cin + ic) * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    }
    dw
}

fn conv_backward_bias(g: &[f64], d: ConvDims) -> Vec<f64> {
    let mut db = vec![0.0; d.cout];
    for oc in 0..d.cout {
        let mut s = 0.0;
        for &gv in &g[oc * d.ho * d.wo..(oc + 1) * d.ho * d.wo] {
            s += gv;
        }
        db[oc] = s;
    }
    db
}
