//! Reverse-mode automatic differentiation over a linear tape of coarse ops.
//!
//! A [`Tape`] records each op's output value together with what its backward pass
//! needs. Leaves are either constants, differentiable inputs, or parameters pulled from
//! a [`ParamStore`]. [`Tape::backward`] walks the tape once in reverse and returns
//! [`Gradients`] for every node that depends on a differentiable leaf.

pub(crate) mod kernels;

use crate::error::{ensure_shape, Error, Result};
use crate::registration::warp;
use crate::ssm::scan::{self, ScanPath};
use crate::tensor::{ParamId, ParamStore, Tensor};
use kernels::ConvGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Silu(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    SoftThreshold { x: Var, theta: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConvAdjoint(Var),
    ConcatChannels(Var, Var),
    Upsample2(Var),
    RasterFlatten(Var),
    RasterUnflatten(Var),
    Flip(Var),
    Scan { u: Var, delta: Var, a_log: Var, b: Var, c: Var, d_skip: Var, checkpoints: Vec<Vec<f64>> },
    Warp { img: Var, phi: Var },
    Mse(Var, Var),
    Smooth(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// A parameter read as a constant (frozen network).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure_shape!(
            self.shape(a) == self.shape(b),
            "{what}: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|x| x * k).collect();
        let out = Tensor::from_vec(v.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    /// Elementwise product with a constant of the same shape (e.g. a mask).
    pub fn mul_const(&mut self, a: Var, k: &Tensor) -> Result<Var> {
        ensure_shape!(self.shape(a) == k.shape(), "mul_const: {:?} vs {:?}", self.shape(a), k.shape());
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().zip(k.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(v.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, k.data().to_vec()), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_vec(v.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `sign(x) * max(|x| - theta_c, 0)` with `theta` of shape `[C]` broadcast over `[N, C, H, W]`.
    pub fn soft_threshold(&mut self, x: Var, theta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure_shape!(self.shape(theta) == [c], "soft_threshold: theta {:?} for {c} channels", self.shape(theta));
        let th = self.value(theta).data();
        if let Some(bad) = th.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::Precondition(format!("soft threshold must be nonnegative, got {bad}")));
        }
        let xv = self.value(x).data();
        let plane = h * w;
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    out[i] = shrink(xv[i], th[ch]);
                }
            }
        }
        let ng = self.ng(x) || self.ng(theta);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out)?, Op::SoftThreshold { x, theta }, ng))
    }

    /// Same-padded 2-d convolution with odd kernel size.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, k, k2) = self.value(w).dims4()?;
        ensure_shape!(wc_in == c_in, "conv2d: weight expects {wc_in} input channels, got {c_in}");
        ensure_shape!(k == k2 && k % 2 == 1, "conv2d: kernel must be square and odd, got {k}x{k2}");
        ensure_shape!(stride >= 1, "conv2d: stride must be positive");
        if let Some(b) = b {
            ensure_shape!(self.shape(b) == [c_out], "conv2d: bias {:?} for {c_out} outputs", self.shape(b));
        }
        let geom = ConvGeom::new(c_in, h, wd, k, stride);
        let mut out = vec![0.0; n * c_out * geom.out_plane()];
        kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            c_out,
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::from_vec(&[n, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// `y = x W^T + b` over the last dimension; `W` is `[D_out, D_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d_in = *xs.last().ok_or_else(|| Error::Shape("linear: scalar input".into()))?;
        let ws = self.shape(w);
        ensure_shape!(ws.len() == 2 && ws[1] == d_in, "linear: weight {ws:?} for input dim {d_in}");
        let d_out = ws[0];
        if let Some(b) = b {
            ensure_shape!(self.shape(b) == [d_out], "linear: bias {:?} for {d_out} outputs", self.shape(b));
        }
        let rows = self.value(x).len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        kernels::gemm(rows, d_in, d_out, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        ensure_shape!(self.shape(gain) == [d] && self.shape(bias) == [d], "layer_norm: affine params must be [{d}]");
        let mut out = vec![0.0; self.value(x).len()];
        let (xhat, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
        );
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let t = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Adjoint filter bank of a same-padded convolution: `[Co, Ci, k, k]` becomes
    /// `[Ci, Co, k, k]` with both spatial axes flipped.
    pub fn conv_adjoint(&mut self, w: Var) -> Result<Var> {
        let (co, ci, k, k2) = self.value(w).dims4()?;
        ensure_shape!(k == k2, "conv_adjoint: kernel must be square");
        let out = adjoint_filter(self.value(w).data(), co, ci, k);
        let ng = self.ng(w);
        Ok(self.push(Tensor::from_vec(&[ci, co, k, k], out)?, Op::ConvAdjoint(w), ng))
    }

    /// Channel concatenation of two `[N, C, H, W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        ensure_shape!(n == nb && h == hb && w == wb, "concat: {:?} vs {:?}", self.shape(a), self.shape(b));
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[n, ca + cb, h, w], out)?, Op::ConcatChannels(a, b), ng))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for nc in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[nc * h2 * w2 + y * w2 + xx] = src[nc * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[n, c, h2, w2], out)?, Op::Upsample2(x), ng))
    }

    /// `[N, C, H, W] -> [N, H*W, C]` in row-major raster order.
    pub fn raster_flatten(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = crate::ssm::flatten_data(self.value(x).data(), n, c, h * w);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[n, h * w, c], out)?, Op::RasterFlatten(x), ng))
    }

    /// `[N, H*W, C] -> [N, C, H, W]`.
    pub fn raster_unflatten(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, l, c) = self.value(x).dims3()?;
        ensure_shape!(l == h * w, "raster_unflatten: sequence length {l} != {h}x{w}");
        let out = crate::ssm::unflatten_data(self.value(x).data(), n, c, l);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out)?, Op::RasterUnflatten(x), ng))
    }

    /// Reverses the sequence axis of `[N, L, D]`.
    pub fn flip(&mut self, x: Var) -> Result<Var> {
        let (n, l, d) = self.value(x).dims3()?;
        let out = crate::ssm::flip_data(self.value(x).data(), n, l, d);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[n, l, d], out)?, Op::Flip(x), ng))
    }

    /// Fused selective scan. `u`, `delta`: `[N, L, D]`; `a_log`: `[D, S]`;
    /// `b`, `c`: `[N, L, S]`; `d_skip`: `[D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        path: ScanPath,
    ) -> Result<Var> {
        let (n, l, d) = self.value(u).dims3()?;
        self.same_shape(u, delta, "scan delta")?;
        let sa = self.shape(a_log);
        ensure_shape!(sa.len() == 2 && sa[0] == d, "scan: A_log {sa:?} for {d} channels");
        let s = sa[1];
        ensure_shape!(self.shape(b) == [n, l, s], "scan: B {:?}, expected [{n}, {l}, {s}]", self.shape(b));
        ensure_shape!(self.shape(c) == [n, l, s], "scan: C {:?}, expected [{n}, {l}, {s}]", self.shape(c));
        ensure_shape!(self.shape(d_skip) == [d], "scan: D {:?} for {d} channels", self.shape(d_skip));
        if let Some(bad) = self.value(delta).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Precondition(format!("step size must be positive, got {bad}")));
        }
        let a = scan::negated_exp(self.value(a_log).data());
        let mut y = vec![0.0; n * l * d];
        let mut checkpoints = Vec::with_capacity(n);
        for i in 0..n {
            let inputs = scan_inputs(self, [u, delta, b, c, d_skip], &a, i, l, d, s);
            checkpoints.push(scan::forward(&inputs, path, &mut y[i * l * d..(i + 1) * l * d]));
        }
        let ng = [u, delta, a_log, b, c, d_skip].iter().any(|v| self.ng(*v));
        let t = Tensor::from_vec(&[n, l, d], y)?;
        Ok(self.push(t, Op::Scan { u, delta, a_log, b, c, d_skip, checkpoints }, ng))
    }

    /// Bilinear warp of `[N, C, H, W]` by `[N, 2, H, W]` displacements.
    pub fn warp(&mut self, img: Var, phi: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(img).dims4()?;
        ensure_shape!(self.shape(phi) == [n, 2, h, w], "warp: field {:?} for image {:?}", self.shape(phi), self.shape(img));
        if self.value(phi).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in deformation field".into()));
        }
        let mut out = vec![0.0; n * c * h * w];
        for i in 0..n {
            warp::forward(
                &self.value(img).data()[i * c * h * w..(i + 1) * c * h * w],
                &self.value(phi).data()[i * 2 * h * w..(i + 1) * 2 * h * w],
                c,
                h,
                w,
                &mut out[i * c * h * w..(i + 1) * c * h * w],
            );
        }
        let ng = self.ng(img) || self.ng(phi);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out)?, Op::Warp { img, phi }, ng))
    }

    /// Mean squared difference over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let m = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), ng))
    }

    /// Mean over pixels and displacement channels of squared forward differences of
    /// a `[N, 2, H, W]` field; the last row/column contributes zero.
    pub fn smooth(&mut self, phi: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(phi).dims4()?;
        let v = self.value(phi).data();
        let mut acc = 0.0;
        for plane in v.chunks(h * w).take(n * c) {
            for y in 0..h {
                for x in 0..w {
                    let p = plane[y * w + x];
                    if y + 1 < h {
                        let d = plane[(y + 1) * w + x] - p;
                        acc += d * d;
                    }
                    if x + 1 < w {
                        let d = plane[y * w + x + 1] - p;
                        acc += d * d;
                    }
                }
            }
        }
        let ng = self.ng(phi);
        Ok(self.push(Tensor::scalar(acc / v.len() as f64), Op::Smooth(phi), ng))
    }

    /// Backpropagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if !self.nodes[root.0].needs_grad {
            return Gradients { vars: grads, params };
        }
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(&node.op, &node.value, &g, &mut grads);
            if let Op::Param(id) = node.op {
                params.push((id, g.clone()));
            }
            grads[i] = Some(g);
        }
        Gradients { vars: grads, params }
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d, _| add_to(d, gd));
                self.acc(grads, *b, |d, _| add_to(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d, _| add_to(d, gd));
                self.acc(grads, *b, |d, _| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d, _| zip3(d, gd, vb, |g, o| g * o));
                self.acc(grads, *b, |d, _| zip3(d, gd, va, |g, o| g * o));
            }
            Op::Scale(a, k) => self.acc(grads, *a, |d, _| d.iter_mut().zip(gd).for_each(|(x, y)| *x += k * y)),
            Op::MulConst(a, m) => self.acc(grads, *a, |d, _| zip3(d, gd, m, |g, o| g * o)),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d, _| {
                    zip3(d, gd, x, |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d, _| zip3(d, gd, x, |g, x| g * sigmoid(x)));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d, _| zip3(d, gd, x, |g, x| if x > 0.0 { g } else { slope * g }));
            }
            Op::Exp(a) => self.acc(grads, *a, |d, _| zip3(d, gd, out.data(), |g, o| g * o)),
            Op::SoftThreshold { x, theta } => {
                let xv = self.value(*x).data();
                let th = self.value(*theta).data();
                let (_, c, h, w) = out.dims4().expect("4-d");
                let plane = h * w;
                let chan = |i: usize| (i / plane) % c;
                self.acc(grads, *x, |d, _| {
                    for i in 0..d.len() {
                        if xv[i].abs() > th[chan(i)] {
                            d[i] += gd[i];
                        }
                    }
                });
                self.acc(grads, *theta, |d, _| {
                    for i in 0..xv.len() {
                        if xv[i].abs() > th[chan(i)] {
                            d[chan(i)] -= gd[i] * xv[i].signum();
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let c_out = self.shape(*w)[0];
                let mut dx = self.take_buf(grads, *x);
                let mut dw = self.take_buf(grads, *w);
                let mut db = b.and_then(|b| self.take_buf(grads, b));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    c_out,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                put_buf(grads, *x, dx);
                put_buf(grads, *w, dw);
                if let Some(b) = b {
                    put_buf(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (d_out, d_in) = (ws[0], ws[1]);
                let rows = self.value(*x).len() / d_in;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d, _| kernels::gemm(rows, d_out, d_in, gd, false, wv, false, d, 1.0));
                self.acc(grads, *w, |d, _| kernels::gemm(d_out, rows, d_in, gd, true, xv, false, d, 1.0));
                if let Some(b) = b {
                    self.acc(grads, *b, |d, _| {
                        for row in gd.chunks(d_out) {
                            add_to(d, row);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let dim = *self.shape(*x).last().unwrap();
                let gv = self.value(*gain).data();
                let mut dx = self.take_buf(grads, *x);
                let mut dg = self.take_buf(grads, *gain);
                let mut db = self.take_buf(grads, *bias);
                kernels::layer_norm_backward(
                    xhat,
                    rstd,
                    dim,
                    gv,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dg.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                put_buf(grads, *x, dx);
                put_buf(grads, *gain, dg);
                put_buf(grads, *bias, db);
            }
            Op::ConvAdjoint(w) => {
                let (co, ci, k, _) = self.value(*w).dims4().expect("4-d");
                // the permutation is an involution once the channel roles are swapped
                let back = adjoint_filter(gd, ci, co, k);
                self.acc(grads, *w, |d, _| add_to(d, &back));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("4-d");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                self.acc(grads, *a, |d, _| {
                    for i in 0..n {
                        let src = &gd[i * (ca + cb) * plane..(i * (ca + cb) + ca) * plane];
                        add_to(&mut d[i * ca * plane..(i + 1) * ca * plane], src);
                    }
                });
                self.acc(grads, *b, |d, _| {
                    for i in 0..n {
                        let src = &gd[(i * (ca + cb) + ca) * plane..(i + 1) * (ca + cb) * plane];
                        add_to(&mut d[i * cb * plane..(i + 1) * cb * plane], src);
                    }
                });
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-d");
                let (h2, w2) = (2 * h, 2 * w);
                self.acc(grads, *x, |d, _| {
                    for nc in 0..n * c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                d[nc * h * w + (y / 2) * w + xx / 2] += gd[nc * h2 * w2 + y * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::RasterFlatten(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-d");
                let back = crate::ssm::unflatten_data(gd, n, c, h * w);
                self.acc(grads, *x, |d, _| add_to(d, &back));
            }
            Op::RasterUnflatten(x) => {
                let (n, l, c) = self.value(*x).dims3().expect("3-d");
                let back = crate::ssm::flatten_data(gd, n, c, l);
                self.acc(grads, *x, |d, _| add_to(d, &back));
            }
            Op::Flip(x) => {
                let (n, l, d) = self.value(*x).dims3().expect("3-d");
                let back = crate::ssm::flip_data(gd, n, l, d);
                self.acc(grads, *x, |dd, _| add_to(dd, &back));
            }
            Op::Scan { u, delta, a_log, b, c, d_skip, checkpoints } => {
                let (n, l, d) = self.value(*u).dims3().expect("3-d");
                let s = self.shape(*a_log)[1];
                let a = scan::negated_exp(self.value(*a_log).data());
                let mut gu = vec![0.0; n * l * d];
                let mut gdelta = vec![0.0; n * l * d];
                let mut ga = vec![0.0; d * s];
                let mut gb = vec![0.0; n * l * s];
                let mut gc = vec![0.0; n * l * s];
                let mut gdskip = vec![0.0; d];
                for (i, ck) in checkpoints.iter().enumerate() {
                    let inputs = scan_inputs(self, [*u, *delta, *b, *c, *d_skip], &a, i, l, d, s);
                    scan::backward(
                        &inputs,
                        ck,
                        &gd[i * l * d..(i + 1) * l * d],
                        scan::ScanGrads {
                            u: &mut gu[i * l * d..(i + 1) * l * d],
                            delta: &mut gdelta[i * l * d..(i + 1) * l * d],
                            a: &mut ga,
                            b: &mut gb[i * l * s..(i + 1) * l * s],
                            c: &mut gc[i * l * s..(i + 1) * l * s],
                            d_skip: &mut gdskip,
                        },
                    );
                }
                // dA_log = dA * dA/dA_log = dA * A
                for (g, av) in ga.iter_mut().zip(&a) {
                    *g *= av;
                }
                self.acc(grads, *u, |dd, _| add_to(dd, &gu));
                self.acc(grads, *delta, |dd, _| add_to(dd, &gdelta));
                self.acc(grads, *a_log, |dd, _| add_to(dd, &ga));
                self.acc(grads, *b, |dd, _| add_to(dd, &gb));
                self.acc(grads, *c, |dd, _| add_to(dd, &gc));
                self.acc(grads, *d_skip, |dd, _| add_to(dd, &gdskip));
            }
            Op::Warp { img, phi } => {
                let (n, c, h, w) = self.value(*img).dims4().expect("4-d");
                let mut di = self.take_buf(grads, *img);
                let mut dp = self.take_buf(grads, *phi);
                let (iv, pv) = (self.value(*img).data(), self.value(*phi).data());
                let isz = c * h * w;
                let psz = 2 * h * w;
                for i in 0..n {
                    warp::backward(
                        &iv[i * isz..(i + 1) * isz],
                        &pv[i * psz..(i + 1) * psz],
                        c,
                        h,
                        w,
                        &gd[i * isz..(i + 1) * isz],
                        di.as_mut().map(|t| &mut t.data_mut()[i * isz..(i + 1) * isz]),
                        dp.as_mut().map(|t| &mut t.data_mut()[i * psz..(i + 1) * psz]),
                    );
                }
                put_buf(grads, *img, di);
                put_buf(grads, *phi, dp);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / va.len() as f64;
                self.acc(grads, *a, |d, _| {
                    for i in 0..d.len() {
                        d[i] += k * (va[i] - vb[i]);
                    }
                });
                self.acc(grads, *b, |d, _| {
                    for i in 0..d.len() {
                        d[i] -= k * (va[i] - vb[i]);
                    }
                });
            }
            Op::Smooth(phi) => {
                let (n, c, h, w) = self.value(*phi).dims4().expect("4-d");
                let v = self.value(*phi).data();
                let k = 2.0 * gd[0] / v.len() as f64;
                self.acc(grads, *phi, |d, _| {
                    for pl in 0..n * c {
                        let o = pl * h * w;
                        for y in 0..h {
                            for x in 0..w {
                                let i = o + y * w + x;
                                if y + 1 < h {
                                    let diff = v[i + w] - v[i];
                                    d[i + w] += k * diff;
                                    d[i] -= k * diff;
                                }
                                if x + 1 < w {
                                    let diff = v[i + 1] - v[i];
                                    d[i + 1] += k * diff;
                                    d[i] -= k * diff;
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn take_buf(&self, grads: &mut [Option<Tensor>], v: Var) -> Option<Tensor> {
        if !self.ng(v) {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(v))))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        if let Some(mut t) = self.take_buf(grads, v) {
            f(t.data_mut(), self.value(v));
            grads[v.0] = Some(t);
        }
    }
}

fn put_buf(grads: &mut [Option<Tensor>], v: Var, t: Option<Tensor>) {
    if t.is_some() {
        grads[v.0] = t;
    }
}

fn scan_inputs<'a>(
    tape: &'a Tape,
    [u, delta, b, c, d_skip]: [Var; 5],
    a: &'a [f64],
    i: usize,
    l: usize,
    d: usize,
    s: usize,
) -> scan::ScanInputs<'a> {
    scan::ScanInputs {
        u: &tape.value(u).data()[i * l * d..(i + 1) * l * d],
        delta: &tape.value(delta).data()[i * l * d..(i + 1) * l * d],
        a,
        b: &tape.value(b).data()[i * l * s..(i + 1) * l * s],
        c: &tape.value(c).data()[i * l * s..(i + 1) * l * s],
        d_skip: tape.value(d_skip).data(),
        len: l,
        dim: d,
        state: s,
        chunk: scan::SCAN_CHUNK,
    }
}

fn adjoint_filter(w: &[f64], co: usize, ci: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    out[((i * co + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] = w[((o * ci + i) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

fn add_to(d: &mut [f64], src: &[f64]) {
    for (x, y) in d.iter_mut().zip(src) {
        *x += y;
    }
}

fn zip3(d: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((x, gv), ov) in d.iter_mut().zip(g).zip(other) {
        *x += f(*gv, *ov);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn shrink(x: f64, theta: f64) -> f64 {
    x.signum() * (x.abs() - theta).max(0.0)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    vars: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter leaf; a parameter read more than once appears once per read.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    /// Accumulates `scale * grad` into a per-parameter buffer indexed by [`ParamId`].
    pub fn accumulate_into(&self, buffers: &mut [Option<Tensor>], scale: f64) {
        for (id, g) in &self.params {
            let slot = &mut buffers[id.index()];
            match slot {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= scale);
                    *slot = Some(t);
                }
            }
        }
    }
}
