//! Reverse-mode automatic differentiation on a tape.
//!
//! Every operation appends a node holding its output value; `backward`
//! walks the tape in reverse. Parameters enter through [`Graph::param`],
//! which creates one node per parameter so gradients of repeated uses
//! accumulate in place.

use std::collections::HashMap;

use docalign_core::correlation::{global_correlation_raw, local_channels, local_correlation_raw};
use docalign_core::sample::{bilinear_taps, source_axis};

use crate::error::{NetError, Result};
use crate::params::ParamStore;
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor added to squared norms before channel normalization.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, k: usize, stride: usize, pad: usize, col: Option<Vec<T>> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, a: T },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Warp { x: Var, flow: Var, border: bool },
    LocalCorr { a: Var, b: Var, radius: usize },
    GlobalCorr { r: Var, q: Var },
    L2Norm { x: Var, inv: Vec<T> },
    Softmax9(Var),
    ConvexUp { f: Var, w: Var },
    Resize { x: Var, scales: Vec<T> },
    L1 { x: Var, target: Tensor<T> },
    Dot { x: Var, w: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: &'p ParamStore<T>,
    param_nodes: HashMap<usize, Var>,
    /// Keep the intermediates needed by `backward`.
    record: bool,
}

/// Gradients of every node, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: HashMap<usize, Var>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter of `store` in store order; unused
    /// parameters get zeros.
    pub fn params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        (0..store.len())
            .map(|i| {
                self.param_nodes
                    .get(&i)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(i).shape()))
            })
            .collect()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NetError::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank3<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(NetError::shape(format!("{what} expects [c, h, w], got {:?}", t.shape())));
    }
    Ok(t.chw())
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<T> {
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let p = oh * ow;
    let mut col = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix >= 0 && ix < w as i64 {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [T]) {
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    for (ox, &g) in row[oy * ow..][..ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix >= 0 && ix < w as i64 {
                            dst[ix as usize] = dst[ix as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Coarse neighbor offset of kernel tap `k` (row-major 3x3).
#[inline]
fn tap_offset(k: usize) -> (i64, i64) {
    (k as i64 / 3 - 1, k as i64 % 3 - 1)
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph that records intermediates for `backward`.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { nodes: Vec::new(), params, param_nodes: HashMap::new(), record: true }
    }

    /// Forward-only graph; `backward` is unavailable.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { record: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Store indices of the parameters referenced so far, ascending.
    pub fn used_params(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.param_nodes.keys().copied().collect();
        u.sort_unstable();
        u
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Node of a stored parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self.params.index_of(name).ok_or_else(|| NetError::invalid(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.param_nodes.get(&i) {
            return Ok(v);
        }
        let v = self.push(self.params.tensor(i).clone(), Op::Param);
        self.param_nodes.insert(i, v);
        Ok(v)
    }

    /// 2-D convolution with square kernel `k`, zero padding `pad`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = rank3(self.value(x), "conv input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(NetError::shape(format!("conv weight {ws:?} for {c}-channel input")));
        }
        let (co, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(NetError::shape(format!("conv kernel {k} on {h}x{wd} with pad {pad}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(NetError::shape(format!("conv bias {:?} for {co} outputs", self.value(b).shape())));
            }
        }
        let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let p = oh * ow;
        let direct = k == 1 && stride == 1 && pad == 0;
        let col = if direct { None } else { Some(im2col(self.value(x).data(), c, h, wd, k, stride, pad)) };
        let mut out = vec![T::zero(); co * p];
        {
            let cols = col.as_deref().unwrap_or(self.value(x).data());
            gemm(co, c * k * k, p, self.value(w).data(), false, cols, false, &mut out, false);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, row) in out.chunks_exact_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bias[o]);
            }
        }
        let col = if self.record { col } else { None };
        Ok(self.push(Tensor::new(vec![co, oh, ow], out)?, Op::Conv { x, w, b, k, stride, pad, col }))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// `a * x + b` with constants.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        self.map(x, |v| a * v + b, Op::Affine { x, a })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, h, w) = rank3(self.value(xs[0]), "concat")?;
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let (cx, hx, wx) = rank3(self.value(x), "concat")?;
            if (hx, wx) != (h, w) {
                return Err(NetError::shape(format!("concat of {h}x{w} and {hx}x{wx}")));
            }
            data.extend_from_slice(self.value(x).data());
            c += cx;
        }
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::Concat(xs.to_vec())))
    }

    /// Channels `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x), "slice")?;
        if start + len > c || len == 0 {
            return Err(NetError::shape(format!("channels {start}..{} of {c}", start + len)));
        }
        let data = self.value(x).data()[start * h * w..(start + len) * h * w].to_vec();
        Ok(self.push(Tensor::new(vec![len, h, w], data)?, Op::Slice { x, start }))
    }

    /// Backward warp `out(p) = x(p + flow(p))`; `flow` is `[2, h, w]` on
    /// the grid of `x`. Outside samples read zero, or the nearest border
    /// pixel when `border` is set.
    pub fn warp(&mut self, x: Var, flow: Var, border: bool) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x), "warp source")?;
        if self.value(flow).shape() != [2, h, w] {
            return Err(NetError::shape(format!("warp flow {:?} for {h}x{w} source", self.value(flow).shape())));
        }
        let (src, f) = (self.value(x).data(), self.value(flow).data());
        let n = h * w;
        let mut out = vec![T::zero(); c * n];
        for p in 0..n {
            let px = T::lit((p % w) as f64) + f[p];
            let py = T::lit((p / w) as f64) + f[n + p];
            let taps = bilinear_taps(px, py, w, h, border);
            for ci in 0..c {
                let plane = &src[ci * n..(ci + 1) * n];
                let mut v = T::zero();
                for t in 0..4 {
                    if let Some(i) = taps.idx[t] {
                        v = v + taps.w[t] * plane[i];
                    }
                }
                out[ci * n + p] = v;
            }
        }
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::Warp { x, flow, border }))
    }

    /// Local correlation `out[k, p] = <a(p), b(p + d_k)>`, zero outside.
    pub fn local_corr(&mut self, a: Var, b: Var, radius: usize) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "local correlation")?;
        let (c, h, w) = rank3(self.value(a), "local correlation")?;
        let out = local_correlation_raw(self.value(a).data(), self.value(b).data(), c, h, w, radius);
        let t = Tensor::new(vec![local_channels(radius), h, w], out)?;
        Ok(self.push(t, Op::LocalCorr { a, b, radius }))
    }

    /// Global correlation: channel `i` holds the scalar products between
    /// reference position `i` and every query position.
    pub fn global_corr(&mut self, r: Var, q: Var) -> Result<Var> {
        let (cr, hr, wr) = rank3(self.value(r), "global correlation reference")?;
        let (cq, hq, wq) = rank3(self.value(q), "global correlation query")?;
        if cr != cq {
            return Err(NetError::shape(format!("global correlation depth {cr} vs {cq}")));
        }
        let out = global_correlation_raw(self.value(r).data(), hr * wr, self.value(q).data(), hq * wq, cr);
        Ok(self.push(Tensor::new(vec![hr * wr, hq, wq], out)?, Op::GlobalCorr { r, q }))
    }

    /// Per-pixel normalization over channels: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x), "l2 norm")?;
        let n = h * w;
        let d = self.value(x).data();
        let eps = T::lit(L2_EPS);
        let inv: Vec<T> = (0..n)
            .map(|p| {
                let s = (0..c).fold(T::zero(), |s, ci| s + d[ci * n + p] * d[ci * n + p]);
                T::one() / (s + eps).sqrt()
            })
            .collect();
        let out = (0..c * n).map(|i| d[i] * inv[i % n]).collect();
        let t = Tensor::new(vec![c, h, w], out)?;
        let inv = if self.record { inv } else { Vec::new() };
        Ok(self.push(t, Op::L2Norm { x, inv }))
    }

    /// Softmax over consecutive groups of nine channels.
    pub fn softmax9(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x), "softmax9")?;
        if c % 9 != 0 {
            return Err(NetError::shape(format!("softmax9 over {c} channels")));
        }
        let n = h * w;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); c * n];
        for g in 0..c / 9 {
            for p in 0..n {
                let m = (0..9).fold(T::neg_infinity(), |m, k| m.max(d[(g * 9 + k) * n + p]));
                let mut s = T::zero();
                for k in 0..9 {
                    let e = (d[(g * 9 + k) * n + p] - m).exp();
                    out[(g * 9 + k) * n + p] = e;
                    s = s + e;
                }
                for k in 0..9 {
                    out[(g * 9 + k) * n + p] = out[(g * 9 + k) * n + p] / s;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::Softmax9(x)))
    }

    /// Convex 4x upsampling of a coarse flow; see [`crate::model::convex_upsample`].
    pub fn convex_upsample(&mut self, f: Var, weights: Var) -> Result<Var> {
        let out = crate::model::convex_upsample_values(self.value(f), self.value(weights))?;
        Ok(self.push(out, Op::ConvexUp { f, w: weights }))
    }

    /// Bilinear resampling to `oh x ow` (pixel centers aligned, edge
    /// clamped), channel `c` multiplied by `scales[c]`, or by `scales[0]`
    /// for all channels when a single scale is given.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize, scales: &[T]) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x), "resize")?;
        if scales.len() != 1 && scales.len() != c {
            return Err(NetError::shape(format!("{} scales for {c} channels", scales.len())));
        }
        if oh == 0 || ow == 0 {
            return Err(NetError::invalid(format!("resize to {oh}x{ow}")));
        }
        let xs: Vec<_> = (0..ow).map(|o| source_axis(o, w, ow)).collect();
        let ys: Vec<_> = (0..oh).map(|o| source_axis(o, h, oh)).collect();
        let d = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            let s = scales[if scales.len() == 1 { 0 } else { ci }];
            let plane = &d[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
                    let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
                    out[(ci * oh + oy) * ow + ox] = (top + (bot - top) * fy) * s;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::Resize { x, scales: scales.to_vec() }))
    }

    /// Mean absolute difference to a constant target (a scalar node).
    pub fn l1(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape(self.value(x), target, "l1 target")?;
        let n = T::lit(target.len() as f64);
        let s = self.value(x).data().iter().zip(target.data()).fold(T::zero(), |s, (&a, &b)| s + (a - b).abs());
        Ok(self.push(Tensor::scalar(s / n), Op::L1 { x, target: target.clone() }))
    }

    /// `sum(x * w)` with a constant `w` (a scalar node).
    pub fn dot(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        same_shape(self.value(x), w, "dot weights")?;
        let s = self.value(x).data().iter().zip(w.data()).fold(T::zero(), |s, (&a, &b)| s + a * b);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w: w.clone() }))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = xs.first().copied().ok_or_else(|| NetError::invalid("sum of nothing"))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if !self.record {
            return Err(NetError::invalid("backward on an inference graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(NetError::shape(format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads, param_nodes: self.param_nodes.clone() })
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Conv { x, w, b, k, stride, pad, col } => {
                let (c, h, wd) = self.value(*x).chw();
                let (co, oh, ow) = y.chw();
                let (k, p) = (*k, oh * ow);
                let kk = c * k * k;
                let cols = col.as_deref().unwrap_or(self.value(*x).data());
                let mut dw = vec![T::zero(); co * kk];
                gemm(co, p, kk, gd, false, cols, true, &mut dw, false);
                acc(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw).expect("weight shape"));
                if let Some(b) = b {
                    let db: Vec<T> = gd.chunks_exact(p).map(|r| r.iter().copied().sum()).collect();
                    acc(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db).expect("bias shape"));
                }
                let mut dcol = vec![T::zero(); kk * p];
                gemm(kk, co, p, self.value(*w).data(), true, gd, false, &mut dcol, false);
                let dx = if col.is_none() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); c * h * wd];
                    col2im(&dcol, c, h, wd, k, *stride, *pad, &mut dx);
                    dx
                };
                acc(grads, *x, Tensor::new(vec![c, h, wd], dx).expect("input shape"));
            }
            Op::Relu(x) => {
                let d = y.data().iter().zip(gd).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let d = y.data().iter().zip(gd).map(|(&v, &g)| g * v * (T::one() - v)).collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Tanh(x) => {
                let d = y.data().iter().zip(gd).map(|(&v, &g)| g * (T::one() - v * v)).collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Affine { x, a } => {
                let d = gd.iter().map(|&g| g * *a).collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                let neg = gd.iter().map(|&v| -v).collect();
                acc(grads, *b, Tensor::new(y.shape().to_vec(), neg).expect("shape"));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(&g, &q)| g * q).collect();
                let db = gd.iter().zip(va).map(|(&g, &p)| g * p).collect();
                acc(grads, *a, Tensor::new(y.shape().to_vec(), da).expect("shape"));
                acc(grads, *b, Tensor::new(y.shape().to_vec(), db).expect("shape"));
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(grads, x, Tensor::new(self.value(x).shape().to_vec(), gd[off..off + n].to_vec()).expect("shape"));
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let (c, h, w) = self.value(*x).chw();
                let mut d = vec![T::zero(); c * h * w];
                d[start * h * w..start * h * w + gd.len()].copy_from_slice(gd);
                acc(grads, *x, Tensor::new(vec![c, h, w], d).expect("shape"));
            }
            Op::Warp { x, flow, border } => {
                let (c, h, w) = self.value(*x).chw();
                let n = h * w;
                let (src, f) = (self.value(*x).data(), self.value(*flow).data());
                let mut dx = vec![T::zero(); c * n];
                let mut df = vec![T::zero(); 2 * n];
                for p in 0..n {
                    let px = T::lit((p % w) as f64) + f[p];
                    let py = T::lit((p / w) as f64) + f[n + p];
                    let taps = bilinear_taps(px, py, w, h, *border);
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for ci in 0..c {
                        let go = gd[ci * n + p];
                        for t in 0..4 {
                            if let Some(q) = taps.idx[t] {
                                dx[ci * n + q] = dx[ci * n + q] + taps.w[t] * go;
                                let v = src[ci * n + q];
                                gx = gx + taps.dwdx[t] * v * go;
                                gy = gy + taps.dwdy[t] * v * go;
                            }
                        }
                    }
                    df[p] = gx;
                    df[n + p] = gy;
                }
                acc(grads, *x, Tensor::new(vec![c, h, w], dx).expect("shape"));
                acc(grads, *flow, Tensor::new(vec![2, h, w], df).expect("shape"));
            }
            Op::LocalCorr { a, b, radius } => {
                let (c, h, w) = self.value(*a).chw();
                let n = h * w;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); c * n];
                let mut db = vec![T::zero(); c * n];
                let r = *radius as i64;
                let side = 2 * *radius + 1;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let k = (dy + r) as usize * side + (dx + r) as usize;
                        for y in 0..h as i64 {
                            let qy = y + dy;
                            if qy < 0 || qy >= h as i64 {
                                continue;
                            }
                            for x in 0..w as i64 {
                                let qx = x + dx;
                                if qx < 0 || qx >= w as i64 {
                                    continue;
                                }
                                let p = (y * w as i64 + x) as usize;
                                let q = (qy * w as i64 + qx) as usize;
                                let go = gd[k * n + p];
                                if go == T::zero() {
                                    continue;
                                }
                                for ci in 0..c {
                                    da[ci * n + p] = da[ci * n + p] + go * vb[ci * n + q];
                                    db[ci * n + q] = db[ci * n + q] + go * va[ci * n + p];
                                }
                            }
                        }
                    }
                }
                acc(grads, *a, Tensor::new(vec![c, h, w], da).expect("shape"));
                acc(grads, *b, Tensor::new(vec![c, h, w], db).expect("shape"));
            }
            Op::GlobalCorr { r, q } => {
                let (c, hr, wr) = self.value(*r).chw();
                let (_, hq, wq) = self.value(*q).chw();
                let (nr, nq) = (hr * wr, hq * wq);
                // out (nr x nq) = r^T (nr x c) * q (c x nq)
                let mut dr = vec![T::zero(); c * nr];
                gemm(c, nq, nr, self.value(*q).data(), false, gd, true, &mut dr, false);
                let mut dq = vec![T::zero(); c * nq];
                gemm(c, nr, nq, self.value(*r).data(), false, gd, false, &mut dq, false);
                acc(grads, *r, Tensor::new(vec![c, hr, wr], dr).expect("shape"));
                acc(grads, *q, Tensor::new(vec![c, hq, wq], dq).expect("shape"));
            }
            Op::L2Norm { x, inv } => {
                let (c, h, w) = y.chw();
                let n = h * w;
                let yd = y.data();
                let mut d = vec![T::zero(); c * n];
                for p in 0..n {
                    let s = (0..c).fold(T::zero(), |s, ci| s + yd[ci * n + p] * gd[ci * n + p]);
                    for ci in 0..c {
                        d[ci * n + p] = (gd[ci * n + p] - yd[ci * n + p] * s) * inv[p];
                    }
                }
                acc(grads, *x, Tensor::new(vec![c, h, w], d).expect("shape"));
            }
            Op::Softmax9(x) => {
                let (c, h, w) = y.chw();
                let n = h * w;
                let yd = y.data();
                let mut d = vec![T::zero(); c * n];
                for gi in 0..c / 9 {
                    for p in 0..n {
                        let s = (0..9).fold(T::zero(), |s, k| s + yd[(gi * 9 + k) * n + p] * gd[(gi * 9 + k) * n + p]);
                        for k in 0..9 {
                            let i = (gi * 9 + k) * n + p;
                            d[i] = yd[i] * (gd[i] - s);
                        }
                    }
                }
                acc(grads, *x, Tensor::new(vec![c, h, w], d).expect("shape"));
            }
            Op::ConvexUp { f, w } => {
                let (fc, h, wd) = self.value(*f).chw();
                let n = h * wd;
                let (fv, wv) = (self.value(*f).data(), self.value(*w).data());
                let (fh, fw) = (4 * h, 4 * wd);
                let mut dfv = vec![T::zero(); fc * n];
                let mut dwv = vec![T::zero(); 144 * n];
                let four = T::lit(4.0);
                for yy in 0..h {
                    for xx in 0..wd {
                        let p = yy * wd + xx;
                        for a in 0..4 {
                            for b in 0..4 {
                                let pos = a * 4 + b;
                                let o = (4 * yy + a) * fw + 4 * xx + b;
                                for k in 0..9 {
                                    let (dy, dx) = tap_offset(k);
                                    let ny = (yy as i64 + dy).clamp(0, h as i64 - 1) as usize;
                                    let nx = (xx as i64 + dx).clamp(0, wd as i64 - 1) as usize;
                                    let q = ny * wd + nx;
                                    let wk = wv[(pos * 9 + k) * n + p];
                                    let mut dwk = T::zero();
                                    for ci in 0..fc {
                                        let go = gd[ci * fh * fw + o];
                                        dwk = dwk + go * four * fv[ci * n + q];
                                        dfv[ci * n + q] = dfv[ci * n + q] + go * four * wk;
                                    }
                                    dwv[(pos * 9 + k) * n + p] = dwv[(pos * 9 + k) * n + p] + dwk;
                                }
                            }
                        }
                    }
                }
                acc(grads, *f, Tensor::new(vec![fc, h, wd], dfv).expect("shape"));
                acc(grads, *w, Tensor::new(vec![144, h, wd], dwv).expect("shape"));
            }
            Op::Resize { x, scales } => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = y.chw();
                let xs: Vec<_> = (0..ow).map(|o| source_axis(o, w, ow)).collect();
                let ys: Vec<_> = (0..oh).map(|o| source_axis(o, h, oh)).collect();
                let mut d = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    let s = scales[if scales.len() == 1 { 0 } else { ci }];
                    let plane = &mut d[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let fx = T::lit(fx);
                            let go = gd[(ci * oh + oy) * ow + ox] * s;
                            let (top, bot) = (go * (T::one() - fy), go * fy);
                            plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - fx);
                            plane[y0 * w + x1] = plane[y0 * w + x1] + top * fx;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - fx);
                            plane[y1 * w + x1] = plane[y1 * w + x1] + bot * fx;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(vec![c, h, w], d).expect("shape"));
            }
            Op::L1 { x, target } => {
                let scale = gd[0] / T::lit(target.len() as f64);
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| {
                        let e = a - b;
                        if e > T::zero() {
                            scale
                        } else if e < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(grads, *x, Tensor::new(target.shape().to_vec(), d).expect("shape"));
            }
            Op::Dot { x, w } => {
                let d = w.data().iter().map(|&v| v * gd[0]).collect();
                acc(grads, *x, Tensor::new(w.shape().to_vec(), d).expect("shape"));
            }
        }
    }
}
