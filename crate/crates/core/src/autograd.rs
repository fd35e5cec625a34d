//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] holding its output value
//! and the ids of its inputs. [`Tape::backward`] walks the tape once in
//! reverse, so each node is visited exactly once and inputs always precede
//! their consumers.
//!
//! ```
//! use dualfete_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_vec(vec![1.0, -2.0]));
//! let x = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
//! let wx = tape.mul(w, x).unwrap();
//! let loss = tape.sum(wx);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    Relu(Var),
    Concat(Var, Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Tensor },
    Dropout { x: Var, keep: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, var: Var, like: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    ensure!(a.shape() == b.shape(), op, "shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// 2D convolution with square kernels and symmetric zero padding.
    ///
    /// `x` is `(B, Cin, H, W)`, `w` is `(Cout, Cin, k, k)` and `b` is `(Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        ensure!(xv.rank() == 4 && wv.rank() == 4, "conv2d", "input {:?} / kernel {:?} must be rank 4", xv.shape(), wv.shape());
        let (n, ci, h, wd) = xv.dims4()?;
        let (co, wci, k, k2) = wv.dims4()?;
        ensure!(wci == ci && k == k2, "conv2d", "kernel {:?} does not fit input {:?}", wv.shape(), xv.shape());
        ensure!(bv.shape() == [co], "conv2d", "bias {:?} does not match {} output channels", bv.shape(), co);
        ensure!(stride >= 1 && h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d", "bad geometry stride={} pad={} for {:?}", stride, pad, xv.shape());
        let geo = ConvGeom::new(n, ci, h, wd, co, k, stride, pad);
        let mut out = vec![0.0; n * co * geo.ho * geo.wo];
        geo.forward(xv.data(), wv.data(), bv.data(), &mut out);
        let value = Tensor::new(vec![n, co, geo.ho, geo.wo], out)?;
        Ok(self.push_op(value, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    /// Nearest-neighbour 2x upsampling of a `(B, C, H, W)` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let src = xv.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push_op(value, Op::Upsample2x(x), &[x]))
    }

    /// Which ReLU inputs on the tape are positive, in recording order.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_op(value, Op::Relu(x), &[x])
    }

    /// Concatenate two `(B, C, H, W)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, h, w) = av.dims4()?;
        let (nb, cb, hb, wb) = bv.dims4()?;
        ensure!(n == nb && h == hb && w == wb, "concat_channels", "shapes {:?} and {:?} differ outside the channel axis", av.shape(), bv.shape());
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bv.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push_op(value, Op::Concat(a, b), &[a, b]))
    }

    /// Softmax over the channel axis of a `(B, C, H, W)` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let plane = h * w;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            let base = i * c * plane;
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(src[base + ch * plane + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = libm::exp(src[base + ch * plane + p] - m);
                    out[base + ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] /= z;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Softmax(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(libm::log);
        self.push_op(value, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(libm::exp);
        self.push_op(value, Op::Exp(x), &[x])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push_op(value, Op::Clamp { x, lo, hi }, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op_name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push_op(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        ensure!(!xv.is_empty(), "mean", "mean of an empty tensor");
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        Ok(self.push_op(value, Op::Mean(x), &[x]))
    }

    /// `sum(x * weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        same_shape("weighted_sum", xv, &weights)?;
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push_op(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Sum of the elements of `x` where `mask` is 1.
    pub fn masked_sum(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        ensure!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0), "masked_sum", "mask must be 0/1");
        self.weighted_sum(x, mask)
    }

    /// Inverted dropout: each element is kept with probability `1 - rate`
    /// and rescaled by `1 / (1 - rate)`. The keep pattern is drawn from a
    /// stream seeded by `seed` alone.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), "dropout", "rate {} outside [0, 1)", rate);
        let xv = self.value(x);
        let mut r = rng::stream(seed);
        let inv = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..xv.len()).map(|_| if r.gen::<f64>() >= rate { inv } else { 0.0 }).collect();
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Dropout { x, keep }, &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        ensure!(lv.len() == 1, "backward", "loss must be a scalar, got shape {:?}", lv.shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let elementwise = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let xv = self.value(x);
            let data = xv.data().iter().zip(out.data()).zip(g.data()).map(|((&xi, &yi), &gi)| f(xi, yi, gi)).collect();
            Tensor::new(xv.shape().to_vec(), data).expect("shape preserved")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, ci, h, wd) = xv.dims4().expect("checked in forward");
                let (co, _, k, _) = wv.dims4().expect("checked in forward");
                let geo = ConvGeom::new(n, ci, h, wd, co, k, *stride, *pad);
                let need_dx = self.requires_grad(*x);
                let mut dx = vec![0.0; if need_dx { xv.len() } else { 0 }];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; co];
                geo.backward(xv.data(), wv.data(), g.data(), need_dx.then_some(&mut dx[..]), &mut dw, &mut db);
                if need_dx {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                }
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(vec![co], db).expect("shape"));
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("rank 4");
                let w2 = 2 * w;
                let mut dx = vec![0.0; xv.len()];
                for plane in 0..n * c {
                    let gs = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            d[(y / 2) * w + xx / 2] += gs[y * w2 + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::Relu(x) => {
                let d = elementwise(*x, &|xi, _, gi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, ca, h, w) = av.dims4().expect("rank 4");
                let cb = bv.shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(av.len());
                let mut dbv = Vec::with_capacity(bv.len());
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    dbv.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), dbv).expect("shape"));
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = out.dims4().expect("rank 4");
                let plane = h * w;
                let (p, gd) = (out.data(), g.data());
                let mut dx = vec![0.0; p.len()];
                for i in 0..n {
                    let base = i * c * plane;
                    for px in 0..plane {
                        let dot: f64 = (0..c).map(|ch| gd[base + ch * plane + px] * p[base + ch * plane + px]).sum();
                        for ch in 0..c {
                            let j = base + ch * plane + px;
                            dx[j] = p[j] * (gd[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx).expect("shape"));
            }
            Op::Log(x) => {
                let d = elementwise(*x, &|xi, _, gi| gi / xi);
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = elementwise(*x, &|_, yi, gi| gi * yi);
                self.accumulate(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = elementwise(*x, &|xi, _, gi| if xi >= lo && xi <= hi { gi } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(gi, bi)| gi * bi).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(gi, ai)| gi * ai).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(gi, bi)| gi / bi).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).zip(bv.data()).map(|((gi, ai), bi)| -gi * ai / (bi * bi)).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gv));
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * gv));
            }
            Op::Dropout { x, keep } => {
                let d = g.data().iter().zip(keep).map(|(gi, k)| gi * k).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
        }
    }
}

/// Loop geometry shared by the convolution forward and backward kernels.
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    fn new(n: usize, ci: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { n, ci, h, w, co, k, stride, pad, ho, wo }
    }

    /// Output-column range `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let lim = self.w + self.pad;
        let hi = if lim > kx { ((lim - kx - 1) / self.stride + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    /// Unfold one image into `(ci * k * k, ho * wo)` patch rows; padding reads as zero.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ohw, k, s) = (self.ho * self.wo, self.k, self.stride);
        cols.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.ci {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &mut cols[r * ohw..(r + 1) * ohw];
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.ho {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let srow = &src[iy * self.w..(iy + 1) * self.w];
                        let drow = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in lo..hi {
                            drow[ox] = srow[ox * s + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add patch rows back onto one image.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ohw, k, s) = (self.ho * self.wo, self.k, self.stride);
        for c in 0..self.ci {
            let dst = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &cols[r * ohw..(r + 1) * ohw];
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.ho {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let srow = &row[oy * self.wo..(oy + 1) * self.wo];
                        let drow = &mut dst[iy * self.w..(iy + 1) * self.w];
                        for ox in lo..hi {
                            drow[ox * s + kx - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: &[f64], out: &mut [f64]) {
        let (hw, ohw, rows) = (self.h * self.w, self.ho * self.wo, self.rows());
        let mut cols = vec![0.0; rows * ohw];
        for b in 0..self.n {
            self.im2col(&x[b * self.ci * hw..(b + 1) * self.ci * hw], &mut cols);
            let ob = &mut out[b * self.co * ohw..(b + 1) * self.co * ohw];
            for (o, dst) in ob.chunks_exact_mut(ohw).enumerate() {
                dst.iter_mut().for_each(|v| *v = bias[o]);
            }
            // Four output channels per pass so each patch row is read once per block.
            let mut o = 0;
            while o < self.co {
                let m = (self.co - o).min(4);
                let block = &mut ob[o * ohw..(o + m) * ohw];
                for r in 0..rows {
                    let c = &cols[r * ohw..(r + 1) * ohw];
                    let w = |j: usize| if j < m { wt[(o + j) * rows + r] } else { 0.0 };
                    multi_axpy(block, ohw, m, [w(0), w(1), w(2), w(3)], c);
                }
                o += m;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(&self, x: &[f64], wt: &[f64], g: &[f64], dx: Option<&mut [f64]>, dw: &mut [f64], db: &mut [f64]) {
        let (hw, ohw, rows) = (self.h * self.w, self.ho * self.wo, self.rows());
        let mut cols = vec![0.0; rows * ohw];
        let mut dcols = vec![0.0; if dx.is_some() { rows * ohw } else { 0 }];
        let mut dx = dx;
        for b in 0..self.n {
            self.im2col(&x[b * self.ci * hw..(b + 1) * self.ci * hw], &mut cols);
            let gb = &g[b * self.co * ohw..(b + 1) * self.co * ohw];
            for o in 0..self.co {
                db[o] += gb[o * ohw..(o + 1) * ohw].iter().sum::<f64>();
            }
            let mut o = 0;
            while o < self.co {
                let m = (self.co - o).min(4);
                let gblock = &gb[o * ohw..(o + m) * ohw];
                for r in 0..rows {
                    let d = multi_dot(gblock, ohw, m, &cols[r * ohw..(r + 1) * ohw]);
                    for j in 0..m {
                        dw[(o + j) * rows + r] += d[j];
                    }
                }
                if dx.is_some() {
                    for r in 0..rows {
                        let w = |j: usize| if j < m { wt[(o + j) * rows + r] } else { 0.0 };
                        multi_axpy_into(&mut dcols[r * ohw..(r + 1) * ohw], [w(0), w(1), w(2), w(3)], gblock, ohw, m);
                    }
                }
                o += m;
            }
            if let Some(dx) = dx.as_deref_mut() {
                self.col2im(&dcols, &mut dx[b * self.ci * hw..(b + 1) * self.ci * hw]);
                dcols.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// `block[j] += a[j] * x` for the first `m` rows of length `len` in `block`.
#[inline]
fn multi_axpy(block: &mut [f64], len: usize, m: usize, a: [f64; 4], x: &[f64]) {
    match m {
        4 => {
            let (r0, rest) = block.split_at_mut(len);
            let (r1, rest) = rest.split_at_mut(len);
            let (r2, r3) = rest.split_at_mut(len);
            for i in 0..len {
                let v = x[i];
                r0[i] += a[0] * v;
                r1[i] += a[1] * v;
                r2[i] += a[2] * v;
                r3[i] += a[3] * v;
            }
        }
        _ => {
            for (j, row) in block.chunks_exact_mut(len).take(m).enumerate() {
                axpy(row, a[j], x);
            }
        }
    }
}

/// `y += sum_j a[j] * rows[j]` over the first `m` rows of `rows`.
#[inline]
fn multi_axpy_into(y: &mut [f64], a: [f64; 4], rows: &[f64], len: usize, m: usize) {
    if m == 4 {
        let (g0, g1, g2, g3) = (&rows[..len], &rows[len..2 * len], &rows[2 * len..3 * len], &rows[3 * len..4 * len]);
        for i in 0..len {
            y[i] += a[0] * g0[i] + a[1] * g1[i] + a[2] * g2[i] + a[3] * g3[i];
        }
    } else {
        for (j, row) in rows.chunks_exact(len).take(m).enumerate() {
            axpy(y, a[j], row);
        }
    }
}

/// Dot products of `x` with each of the first `m` rows of `rows`.
#[inline]
fn multi_dot(rows: &[f64], len: usize, m: usize, x: &[f64]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (j, row) in rows.chunks_exact(len).take(m).enumerate() {
        out[j] = dot(row, x);
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_pattern_lists_positive_inputs_in_order() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let z = tape.constant(t(&[3.0]));
        tape.relu(z);
        tape.relu(y);
        assert_eq!(tape.relu_pattern(), vec![false, false, true, true, false, false, true]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.0, 0.0]).unwrap());
        let p = tape.softmax_channels(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_sum_picks_masked_elements() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1.0, 2.0, 3.0]));
        let s = tape.masked_sum(x, t(&[1.0, 0.0, 1.0])).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 4.0);
        assert!(tape.masked_sum(x, t(&[0.5, 0.0, 1.0])).is_err());
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[0.3, -0.7, 2.0]));
        let x = tape.constant(t(&[1.5, 2.5, -4.0]));
        let wx = tape.mul(w, x).unwrap();
        let l = tape.sum(wx);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.5, 2.5, -4.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[-1.0, -0.5, -3.0]));
        let r = tape.relu(w);
        let l = tape.mean(r).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert!(alloc::format!("{err}").contains("add"));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[1.0, 2.0]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn conv_output_geometry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let w = tape.param(Tensor::zeros(&[5, 3, 3, 3]));
        let b = tape.param(Tensor::full(&[5], 0.25));
        let y1 = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y1).shape(), &[2, 5, 8, 8]);
        let y2 = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y2).shape(), &[2, 5, 4, 4]);
        assert!(tape.value(y2).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // Single 3x3 kernel over a 4x4 ramp, stride 2.
        let mut tape = Tape::new();
        let xs: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let ws: Vec<f64> = (0..9).map(|i| (i as f64) * 0.1 - 0.4).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 4, 4], xs.clone()).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], ws.clone()).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += ws[ky * 3 + kx] * xs[(iy * 4 + ix) as usize];
                        }
                    }
                }
                assert!((tape.value(y).data()[oy * 2 + ox] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[64], 1.0));
        let a = tape.dropout(x, 0.5, 7).unwrap();
        let b = tape.dropout(x, 0.5, 7).unwrap();
        let c = tape.dropout(x, 0.5, 8).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_ne!(tape.value(a), tape.value(c));
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3.0]));
        let xx = tape.mul(x, x).unwrap();
        let l = tape.sum(xx);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }
}
