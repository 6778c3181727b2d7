//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with the
//! state its backward rule needs. Nodes are appended in evaluation order, so
//! a single reverse sweep from the loss visits each node after all of its
//! consumers.

use crate::error::{Error, Result};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvSpec};
use crate::kernels::resample::{resample_backward, resample_forward, AxisTaps};
use crate::kernels::scan::{selective_scan_backward, selective_scan_forward, selective_scan_streaming, ScanDims};
use crate::nn::{ParamId, ParamStore};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index value marking a zero-filled position in [`Graph::gather`].
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Silu,
    /// tanh approximation.
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::Relu => x.max(R::zero()),
            Activation::LeakyRelu(s) => {
                if x > R::zero() {
                    x
                } else {
                    R::of(s) * x
                }
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let inner = R::of(GELU_C) * (x + R::of(GELU_K) * x * x * x);
                R::of(0.5) * x * (R::one() + inner.tanh())
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative<R: Real>(self, x: R, y: R) -> R {
        match self {
            Activation::Relu => {
                if x > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > R::zero() {
                    R::one()
                } else {
                    R::of(s)
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (R::one() - s)
            }
            Activation::Gelu => {
                let c = R::of(GELU_C);
                let k = R::of(GELU_K);
                let t = (c * (x + k * x * x * x)).tanh();
                let half = R::of(0.5);
                half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + R::of(3.0) * k * x * x)
            }
            Activation::Sigmoid => y * (R::one() - y),
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
        }
    }
}

enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: R },
    Expand { x: Var, outer: usize, mid: usize, inner: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv { x: Var, w: Var, geo: Box<ConvGeometry> },
    Act { x: Var, kind: Activation },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    Normalize { x: Var, n: usize, xhat: Vec<R>, rstd: Vec<R> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Resample { x: Var, channels: usize, in_ext: [usize; 3], taps: Box<[AxisTaps; 3]> },
    Gather { x: Var, index: Vec<usize> },
    Concat { parts: Vec<Var> },
    Reduce { x: Var, outer: usize, n: usize, inner: usize, kind: Reduce, argmax: Vec<usize> },
    Scan { inputs: [Var; 5], dims: ScanDims, h: Vec<R>, abar: Vec<R> },
    CausalConv1d { x: Var, w: Var, len: usize, ch: usize, k: usize },
    PosEmbed { coords: Var, w: Var, b: Var, rows: usize, dim: usize },
    DiceLoss { p: Var, target: Var, eps: R },
    BceLogits { x: Var, target: Var },
    Reshape { x: Var },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Recorded computation. Borrows the parameter store it reads weights from.
pub struct Graph<'p, R: Real> {
    nodes: Vec<Node<R>>,
    params: Option<&'p ParamStore<R>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

impl<R: Real> Default for Graph<'_, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, param_vars: Vec::new(), record: true }
    }

    pub fn with_params(params: &'p ParamStore<R>) -> Self {
        Self { nodes: Vec::new(), params: Some(params), param_vars: vec![None; params.len()], record: true }
    }

    /// A graph that keeps no gradient state; `backward` yields nothing.
    pub fn inference(params: &'p ParamStore<R>) -> Self {
        Self { record: false, ..Self::with_params(params) }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.record;
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.bytes()).sum()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.index()).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R, rec: Op<R>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, rec, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (R::of(scale), R::of(shift));
        let data = self.data(x).iter().map(|&v| s * v + c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, data).expect("same shape"), Op::Affine { x, scale: s }, ng)
    }

    /// Broadcast a length-`mid` tensor to `[outer, mid, inner]`, reported
    /// with `shape`.
    pub fn expand(&mut self, x: Var, outer: usize, inner: usize, shape: &[usize]) -> Result<Var> {
        let mid = self.value(x).len();
        if numel(shape) != outer * mid * inner {
            return Err(Error::shape("expand", self.shape(x), shape));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(numel(shape));
        for _ in 0..outer {
            for &v in src {
                data.extend(std::iter::repeat_n(v, inner));
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Expand { x, outer, mid, inner }, ng))
    }

    /// `[M, K] x [K, N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        gemm(
            R::one(),
            MatRef::row_major(self.data(a), 0, m, k),
            MatRef::row_major(self.data(b), 0, k, n),
            R::zero(),
            MatMut::row_major(&mut out, 0, m, n),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Cross-correlation of `x: [C_in, H, W, D]` with `w: [C_out, C_in, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let geo = ConvGeometry::new(spec, self.shape(x), self.shape(w))?;
        let out = conv3d_forward(&geo, self.data(x), self.data(w));
        let shape = geo.out_shape();
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv { x, w, geo: Box::new(geo) }, ng))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let data = self.data(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, data).expect("same shape"), Op::Act { x, kind }, ng)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![R::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = R::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = R::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, outer, n, inner }, ng))
    }

    /// Zero-mean unit-variance normalization of each contiguous run of `n`
    /// values (rows of `[len / n, n]`).
    pub fn normalize_rows(&mut self, x: Var, n: usize, eps: f64) -> Result<Var> {
        let len = self.value(x).len();
        if n == 0 || !len.is_multiple_of(n) {
            return Err(Error::invalid("normalize", format!("row length {n} does not divide {len}")));
        }
        let rows = len / n;
        let src = self.data(x);
        let mut xhat = vec![R::zero(); len];
        let mut rstd = vec![R::zero(); rows];
        let nf = R::of(n as f64);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<R>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / nf;
            let rs = R::one() / (var + R::of(eps)).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&shape, xhat.clone())?, Op::Normalize { x, n, xhat, rstd }, ng))
    }

    /// 2x2x2 max pooling of `[C, H, W, D]`; extents must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1..].iter().any(|&e| e % 2 != 0 || e == 0) {
            return Err(Error::invalid("maxpool2", format!("needs even spatial extents, got {s:?}")));
        }
        let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
        let (oh, ow, od) = (h / 2, w / 2, d / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * oh * ow * od);
        let mut argmax = Vec::with_capacity(c * oh * ow * od);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..od {
                        let mut best = R::neg_infinity();
                        let mut at = 0;
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let idx = ((ch * h + 2 * i + a) * w + 2 * j + b) * d + 2 * k + e;
                                    if src[idx] > best {
                                        best = src[idx];
                                        at = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow, od], out)?, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Separable trilinear sampling of `[C, H, W, D]` with per-axis taps.
    pub fn resample(&mut self, x: Var, taps: [AxisTaps; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("resample", format!("expects [C, H, W, D], got {s:?}")));
        }
        let in_ext = [s[1], s[2], s[3]];
        let out = resample_forward(self.data(x), s[0], in_ext, &taps);
        let shape = [s[0], taps[0].len(), taps[1].len(), taps[2].len()];
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Resample { x, channels: s[0], in_ext, taps: Box::new(taps) },
            ng,
        ))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(Error::invalid("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let src = self.data(x);
        if index.iter().any(|&i| i != GATHER_ZERO && i >= src.len()) {
            return Err(Error::invalid("gather", "index out of range"));
        }
        let data = index.iter().map(|&i| if i == GATHER_ZERO { R::zero() } else { src[i] }).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x, index }, ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat", &first, s));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = lead;
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// Mean or max over `axis`, which is removed from the shape.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("reduce", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![R::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        let nf = R::of(n as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                match kind {
                    Reduce::Mean => {
                        let mut acc = R::zero();
                        for j in 0..n {
                            acc += src[at(j)];
                        }
                        out[o * inner + i] = acc / nf;
                    }
                    Reduce::Max => {
                        let mut best = R::neg_infinity();
                        let mut arg = at(0);
                        for j in 0..n {
                            if src[at(j)] > best {
                                best = src[at(j)];
                                arg = at(j);
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = arg;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Reduce { x, outer, n, inner, kind, argmax }, ng))
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, 0, Reduce::Mean)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Selective scan; see [`crate::kernels::scan::selective_scan_forward`].
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let sa = self.shape(a).to_vec();
        if su.len() != 2 || sa.len() != 2 || su[1] != sa[0] {
            return Err(Error::shape("selective_scan", &su, &sa));
        }
        let dims = ScanDims { len: su[0], channels: su[1], state: sa[1] };
        if self.shape(delta) != su.as_slice() {
            return Err(Error::shape("selective_scan", &su, self.shape(delta)));
        }
        for v in [b, c] {
            if self.shape(v) != [dims.len, dims.state] {
                return Err(Error::shape("selective_scan", &[dims.len, dims.state], self.shape(v)));
            }
        }
        let ng = self.ng(&[u, delta, a, b, c]);
        let (du, dd, da, db, dc) = (self.data(u), self.data(delta), self.data(a), self.data(b), self.data(c));
        let (y, h, abar) = if ng {
            selective_scan_forward(dims, du, dd, da, db, dc)
        } else {
            (selective_scan_streaming(dims, du, dd, da, db, dc), Vec::new(), Vec::new())
        };
        Ok(self.push(Tensor::new(&su, y)?, Op::Scan { inputs: [u, delta, a, b, c], dims, h, abar }, ng))
    }

    /// Causal depthwise convolution along the sequence axis of `x: [L, E]`
    /// with `w: [E, K]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape("causal_conv1d", &sx, &sw));
        }
        let (len, ch, k) = (sx[0], sx[1], sw[1]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![R::zero(); len * ch];
        for t in 0..len {
            for j in 0..k {
                let Some(src) = (t + j + 1).checked_sub(k) else { continue };
                for e in 0..ch {
                    out[t * ch + e] += wd[e * k + j] * xd[src * ch + e];
                }
            }
        }
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::new(&sx, out)?, Op::CausalConv1d { x, w, len, ch, k }, ng))
    }

    /// `coords[L, 3] . w[3, T] + b[T]`, accumulated in a fixed order so equal
    /// coordinate rows give bitwise-equal embeddings.
    pub fn pos_embed(&mut self, coords: Var, w: Var, b: Var) -> Result<Var> {
        let (sc, sw) = (self.shape(coords).to_vec(), self.shape(w).to_vec());
        if sc.len() != 2 || sc[1] != 3 || sw.len() != 2 || sw[0] != 3 || self.shape(b) != [sw[1]] {
            return Err(Error::shape("pos_embed", &sc, &sw));
        }
        let (rows, dim) = (sc[0], sw[1]);
        let (cd, wd, bd) = (self.data(coords), self.data(w), self.data(b));
        let mut out = vec![R::zero(); rows * dim];
        for l in 0..rows {
            for t in 0..dim {
                out[l * dim + t] = bd[t] + cd[l * 3] * wd[t] + cd[l * 3 + 1] * wd[dim + t] + cd[l * 3 + 2] * wd[2 * dim + t];
            }
        }
        let ng = self.ng(&[coords, w, b]);
        Ok(self.push(Tensor::new(&[rows, dim], out)?, Op::PosEmbed { coords, w, b, rows, dim }, ng))
    }

    /// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
    pub fn dice_loss(&mut self, p: Var, target: Var, eps: f64) -> Result<Var> {
        self.same_shape("dice_loss", p, target)?;
        let (pd, gd) = (self.data(p), self.data(target));
        let inter: R = pd.iter().zip(gd).map(|(&a, &b)| a * b).sum();
        let total: R = pd.iter().copied().sum::<R>() + gd.iter().copied().sum::<R>();
        let e = R::of(eps);
        let loss = R::one() - (R::of(2.0) * inter + e) / (total + e);
        let ng = self.ng(&[p, target]);
        Ok(self.push(Tensor::scalar(loss), Op::DiceLoss { p, target, eps: e }, ng))
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, x: Var, target: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", x, target)?;
        let (xd, td) = (self.data(x), self.data(target));
        let n = R::of(xd.len().max(1) as f64);
        let total: R = xd
            .iter()
            .zip(td)
            .map(|(&v, &t)| v.max(R::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(&[x, target]);
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogits { x, target }, ng))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        let mut kept: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                kept[i] = Some(g);
            }
        }
        Ok(Gradients { grads: kept, param_vars: self.param_vars.clone() })
    }

    fn backprop(&self, op: &Op<R>, value: &Tensor<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [R])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![R::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let add_into = |dst: &mut [R], src: &[R]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        match op {
            Op::Leaf => {}
            Op::Reshape { x } => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &mut |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += *scale * s;
                }
            }),
            Op::Expand { x, outer, mid, inner } => acc(*x, &mut |gx| {
                let mut idx = 0;
                for _ in 0..*outer {
                    for m in gx.iter_mut().take(*mid) {
                        for &s in &g[idx..idx + inner] {
                            *m += s;
                        }
                        idx += inner;
                    }
                }
            }),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    gemm(
                        R::one(),
                        MatRef::row_major(g, 0, m, n),
                        MatRef::row_major(bd, 0, k, n).t(),
                        R::one(),
                        MatMut::row_major(ga, 0, m, k),
                    )
                });
                acc(*b, &mut |gb| {
                    gemm(
                        R::one(),
                        MatRef::row_major(ad, 0, m, k).t(),
                        MatRef::row_major(g, 0, m, n),
                        R::one(),
                        MatMut::row_major(gb, 0, k, n),
                    )
                });
            }
            Op::Conv { x, w, geo } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let (dx, dw) = conv3d_backward(geo, self.data(*x), self.data(*w), g, need_dx);
                if need_dx {
                    acc(*x, &mut |gx| add_into(gx, &dx));
                }
                acc(*w, &mut |gw| add_into(gw, &dw));
            }
            Op::Act { x, kind } => {
                let xd = self.data(*x);
                let yd = value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kind.derivative(xd[i], yd[i]);
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = value.data();
                acc(*x, &mut |gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut dotp = R::zero();
                            for j in 0..*n {
                                dotp += g[at(j)] * y[at(j)];
                            }
                            for j in 0..*n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::Normalize { x, n, xhat, rstd } => acc(*x, &mut |gx| {
                let nf = R::of(*n as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let range = r * n..(r + 1) * n;
                    let gr = &g[range.clone()];
                    let xr = &xhat[range.clone()];
                    let mean_g = gr.iter().copied().sum::<R>() / nf;
                    let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<R>() / nf;
                    for (j, d) in gx[range].iter_mut().enumerate() {
                        *d += rs * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }),
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |gx| {
                for (&src, &s) in argmax.iter().zip(g) {
                    gx[src] += s;
                }
            }),
            Op::Resample { x, channels, in_ext, taps } => {
                let dx = resample_backward(g, *channels, *in_ext, taps);
                acc(*x, &mut |gx| add_into(gx, &dx));
            }
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (&i, &s) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        gx[i] += s;
                    }
                }
            }),
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Reduce { x, outer, n, inner, kind, argmax } => acc(*x, &mut |gx| match kind {
                Reduce::Mean => {
                    let nf = R::of(*n as f64);
                    for o in 0..*outer {
                        for j in 0..*n {
                            for i in 0..*inner {
                                gx[(o * n + j) * inner + i] += g[o * inner + i] / nf;
                            }
                        }
                    }
                }
                Reduce::Max => {
                    for (&src, &s) in argmax.iter().zip(g) {
                        gx[src] += s;
                    }
                }
            }),
            Op::Scan { inputs, dims, h, abar } => {
                let [u, delta, a, b, c] = *inputs;
                let sg = selective_scan_backward(
                    *dims,
                    self.data(u),
                    self.data(delta),
                    self.data(a),
                    self.data(b),
                    self.data(c),
                    h,
                    abar,
                    g,
                );
                acc(u, &mut |d| add_into(d, &sg.u));
                acc(delta, &mut |d| add_into(d, &sg.delta));
                acc(a, &mut |d| add_into(d, &sg.a));
                acc(b, &mut |d| add_into(d, &sg.b));
                acc(c, &mut |d| add_into(d, &sg.c));
            }
            Op::CausalConv1d { x, w, len, ch, k } => {
                let (len, ch, k) = (*len, *ch, *k);
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |gx| {
                    for t in 0..len {
                        for j in 0..k {
                            let Some(src) = (t + j + 1).checked_sub(k) else { continue };
                            for e in 0..ch {
                                gx[src * ch + e] += wd[e * k + j] * g[t * ch + e];
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for t in 0..len {
                        for j in 0..k {
                            let Some(src) = (t + j + 1).checked_sub(k) else { continue };
                            for e in 0..ch {
                                gw[e * k + j] += g[t * ch + e] * xd[src * ch + e];
                            }
                        }
                    }
                });
            }
            Op::PosEmbed { coords, w, b, rows, dim } => {
                let (rows, dim) = (*rows, *dim);
                let (cd, wd) = (self.data(*coords), self.data(*w));
                acc(*w, &mut |gw| {
                    for l in 0..rows {
                        for a in 0..3 {
                            for t in 0..dim {
                                gw[a * dim + t] += cd[l * 3 + a] * g[l * dim + t];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for l in 0..rows {
                        for t in 0..dim {
                            gb[t] += g[l * dim + t];
                        }
                    }
                });
                acc(*coords, &mut |gc| {
                    for l in 0..rows {
                        for a in 0..3 {
                            for t in 0..dim {
                                gc[l * 3 + a] += wd[a * dim + t] * g[l * dim + t];
                            }
                        }
                    }
                });
            }
            Op::DiceLoss { p, target, eps } => {
                let (pd, td) = (self.data(*p), self.data(*target));
                let inter: R = pd.iter().zip(td).map(|(&a, &b)| a * b).sum();
                let total: R = pd.iter().copied().sum::<R>() + td.iter().copied().sum::<R>();
                let den = total + *eps;
                let num = R::of(2.0) * inter + *eps;
                let scale = g[0] / (den * den);
                acc(*p, &mut |gp| {
                    for i in 0..gp.len() {
                        gp[i] -= scale * (R::of(2.0) * td[i] * den - num);
                    }
                });
                acc(*target, &mut |gt| {
                    for i in 0..gt.len() {
                        gt[i] -= scale * (R::of(2.0) * pd[i] * den - num);
                    }
                });
            }
            Op::BceLogits { x, target } => {
                let (xd, td) = (self.data(*x), self.data(*target));
                let scale = g[0] / R::of(xd.len().max(1) as f64);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += scale * (sigmoid(xd[i]) - td[i]);
                    }
                });
                acc(*target, &mut |gt| {
                    for i in 0..gt.len() {
                        gt[i] -= scale * xd[i];
                    }
                });
            }
        }
    }
}

/// Gradients of the leaves of a graph after [`Graph::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    param_vars: Vec<Option<Var>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf; `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[R]> {
        self.param_vars.get(id.index()).copied().flatten().and_then(|v| self.get(v))
    }
}
