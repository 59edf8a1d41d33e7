//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied during a forward pass. Values
//! live in the tape and are addressed by [`Var`] handles; [`Tape::backward`]
//! replays the record in reverse and returns the accumulated [`Gradients`].
//! Nodes whose inputs carry no gradient are marked non-differentiable at
//! record time, so constants and data never accumulate anything.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Element, Shape, Tensor};

/// Floor applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch = 0,
    Channel = 1,
    Height = 2,
    Width = 3,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Elu(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    HSample { image: Var, offsets: Var },
    AvgPool { x: Var, k: (usize, usize), s: (usize, usize) },
    BoxMean { x: Var, r: usize },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, axis: Axis, start: usize },
    MeanChannels(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    // -- elementwise ------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T + Sync) -> Result<(Tensor<T>, Shape)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = Shape::broadcast(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("operands {sa} and {sb} do not broadcast")))?;
        Ok((kernels::broadcast_binary(self.value(a), self.value(b), out, f), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::from_f64(k);
        let v = self.value(x).map(|a| a * k);
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let k = T::from_f64(k);
        let v = self.value(x).map(|a| a + k);
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// `k - x`.
    pub fn rsub_scalar(&mut self, k: f64, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, k)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    /// Natural log of `max(x, LOG_FLOOR)`. Negative or NaN inputs are rejected.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|a| !(**a >= T::ZERO)) {
            return Err(Error::invalid("log", format!("argument {bad} is outside the guarded domain [0, inf)")));
        }
        let floor = T::from_f64(LOG_FLOOR);
        let v = xv.map(|a| a.max(floor).ln());
        Ok(self.push(v, Op::Log(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::ZERO { a } else { a.exp() - T::ONE });
        self.push(v, Op::Elu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::ZERO));
        self.push(v, Op::Relu(x), &[x])
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(v, Op::Clamp(x, lo, hi), &[x])
    }

    // -- structured ops ---------------------------------------------------

    /// 2-D cross-correlation with zero padding.
    ///
    /// `w` is `[c_out, c_in, k_h, k_w]`; `b`, if given, holds `c_out` values.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let [_, c, h, wd] = self.shape(x).0;
        let [c_out, c_in, kh, kw] = self.shape(w).0;
        if c != c_in {
            return Err(Error::shape("conv2d", format!("input channels {c} != weight c_in {c_in}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d", "stride components must be >= 1"));
        }
        if h + 2 * pad.0 < kh {
            return Err(Error::shape("conv2d", format!("padded height {} < kernel height {kh}", h + 2 * pad.0)));
        }
        if wd + 2 * pad.1 < kw {
            return Err(Error::shape("conv2d", format!("padded width {} < kernel width {kw}", wd + 2 * pad.1)));
        }
        if let Some(b) = b {
            let n = self.value(b).numel();
            if n != c_out {
                return Err(Error::shape("conv2d", format!("bias length {n} != c_out {c_out}")));
            }
        }
        let geom = ConvGeometry { c_in, h, w: wd, kh, kw, stride, pad };
        let v = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Horizontal bilinear sampling: `out(..,i,j) = image(..,i, j - offsets(..,0,i,j))`,
    /// coordinates clamped to `[0, w-1]`.
    pub fn bilinear_hsample(&mut self, image: Var, offsets: Var) -> Result<Var> {
        let [n, _, h, w] = self.shape(image).0;
        let so = self.shape(offsets);
        if so != Shape::new(n, 1, h, w) {
            return Err(Error::shape(
                "bilinear_hsample",
                format!("offsets {so} must be {} for image {}", Shape::new(n, 1, h, w), self.shape(image)),
            ));
        }
        if !self.value(offsets).all_finite() {
            return Err(Error::NonFinite("bilinear_hsample offsets".into()));
        }
        let v = kernels::hsample_forward(self.value(image), self.value(offsets));
        Ok(self.push(v, Op::HSample { image, offsets }, &[image, offsets]))
    }

    /// Window mean with no padding; spatial sizes must be covered exactly.
    pub fn avg_pool(&mut self, x: Var, k: (usize, usize), s: (usize, usize)) -> Result<Var> {
        let [_, _, h, w] = self.shape(x).0;
        if h < k.0 || w < k.1 || (h - k.0) % s.0 != 0 || (w - k.1) % s.1 != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("{h}x{w} is not tiled by {}x{} windows at stride {}x{}", k.0, k.1, s.0, s.1),
            ));
        }
        let v = kernels::avg_pool_forward(self.value(x), k, s);
        Ok(self.push(v, Op::AvgPool { x, k, s }, &[x]))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        self.avg_pool(x, (2, 2), (2, 2))
    }

    /// Area downsampling by an integer factor.
    pub fn downsample_area(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("downsample_area", "factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(x);
        }
        self.avg_pool(x, (factor, factor), (factor, factor))
    }

    /// Same-size mean over a `(2r+1) x (2r+1)` window clipped at the borders.
    pub fn box_mean(&mut self, x: Var, r: usize) -> Var {
        let v = kernels::box_mean_forward(self.value(x), r);
        self.push(v, Op::BoxMean { x, r }, &[x])
    }

    pub fn nearest_upsample2x(&mut self, x: Var) -> Var {
        let v = kernels::upsample2x_forward(self.value(x));
        self.push(v, Op::Upsample2x(x), &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.shape(first).0;
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n(), s.h(), s.w()) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {s} does not match batch/spatial dims of {}", self.shape(first)),
                ));
            }
            c_total += s.c();
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for &x in xs {
                let t = self.value(x);
                let per = t.shape().c() * h * w;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let v = Tensor::from_vec(Shape::new(n, c_total, h, w), data)?;
        Ok(self.push(v, Op::Concat(xs.to_vec()), xs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let d = axis as usize;
        if start + len > s.0[d] {
            return Err(Error::shape("narrow", format!("range {start}..{} exceeds {axis:?} size {}", start + len, s.0[d])));
        }
        let mut os = s;
        os.0[d] = len;
        let src = self.value(x);
        let v = Tensor::from_fn(os, |mut idx| {
            idx[d] += start;
            src.at(idx)
        });
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn mean_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let src = self.value(x);
        let inv = T::from_f64(1.0 / s.c() as f64);
        let v = Tensor::from_fn(Shape::new(s.n(), 1, s.h(), s.w()), |[b, _, i, j]| {
            (0..s.c()).fold(T::ZERO, |acc, c| acc + src.at([b, c, i, j])) * inv
        });
        self.push(v, Op::MeanChannels(x), &[x])
    }

    /// Mean of all elements as a `1x1x1x1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), &[x])
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be a scalar, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(ls, T::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            // Keep non-leaf gradients available for inspection.
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = kernels::reduce_to(g, self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let s = g.shape();
                if self.requires_grad(*a) {
                    let ga = kernels::broadcast_binary(g, self.value(*b), s, |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = kernels::broadcast_binary(g, self.value(*a), s, |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let s = g.shape();
                if self.requires_grad(*a) {
                    let ga = kernels::broadcast_binary(g, self.value(*b), s, |x, y| x / y);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -out / b
                    let q = kernels::broadcast_binary(out, self.value(*b), s, |o, y| -o / y);
                    self.accumulate(grads, *b, g.zip_map(&q, |x, y| x * y));
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::ZERO {
                        gv
                    } else if xv < T::ZERO {
                        -gv
                    } else {
                        T::ZERO
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv * two * xv));
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, o| gv * o)),
            Op::Log(x) => {
                let floor = T::from_f64(LOG_FLOOR);
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > floor { gv / xv } else { T::ZERO });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, o| gv * o * (T::ONE - o))),
            Op::Elu(x) => {
                let d = kernels::broadcast_binary(g, self.value(*x), g.shape(), |gv, xv| {
                    if xv > T::ZERO {
                        gv
                    } else {
                        gv * xv.exp()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::ZERO { gv } else { T::ZERO });
                self.accumulate(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { T::ZERO });
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.requires_grad(*x), self.requires_grad(*w), b.is_some_and(|b| self.requires_grad(b)));
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), g, geom, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    let db = Tensor::from_vec(self.shape(*b), db.into_vec()).expect("bias shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::HSample { image, offsets } => {
                let (di, doff) = kernels::hsample_backward(self.value(*image), self.value(*offsets), g);
                self.accumulate(grads, *image, di);
                self.accumulate(grads, *offsets, doff);
            }
            Op::AvgPool { x, k, s } => {
                self.accumulate(grads, *x, kernels::avg_pool_backward(self.shape(*x), g, *k, *s));
            }
            Op::BoxMean { x, r } => self.accumulate(grads, *x, kernels::box_mean_backward(g, *r)),
            Op::Upsample2x(x) => self.accumulate(grads, *x, kernels::upsample2x_backward(self.shape(*x), g)),
            Op::Concat(xs) => {
                let [n, _, h, w] = g.shape().0;
                let mut c0 = 0;
                for &x in xs {
                    let c = self.shape(x).c();
                    if self.requires_grad(x) {
                        let part = Tensor::from_fn(Shape::new(n, c, h, w), |[b, ch, i, j]| g.at([b, c0 + ch, i, j]));
                        self.accumulate(grads, x, part);
                    }
                    c0 += c;
                }
            }
            Op::Narrow { x, axis, start } => {
                let d = *axis as usize;
                let mut dx = Tensor::zeros(self.shape(*x));
                let [n, c, h, w] = g.shape().0;
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let mut idx = [b, ch, i, j];
                                idx[d] += start;
                                dx.set(idx, g.at([b, ch, i, j]));
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanChannels(x) => {
                let s = self.shape(*x);
                let inv = T::from_f64(1.0 / s.c() as f64);
                let dx = Tensor::from_fn(s, |[b, _, i, j]| g.at([b, 0, i, j]) * inv);
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let gv = g.item() / T::from_f64(s.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(s, gv));
            }
        }
    }
}

/// Logistic function, kept strictly inside (0, 1) at the element precision.
#[inline]
pub(crate) fn sigmoid<T: Element>(a: T) -> T {
    let s = if a >= T::ZERO {
        T::ONE / (T::ONE + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::ONE + e)
    };
    let top = T::ONE - T::epsilon() / T::from_f64(2.0);
    s.max(T::min_positive_value()).min(top)
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
