//! Reverse-mode autodiff over an append-only arena of 4-D tensors.
//!
//! A [`Graph`] is built fresh for every training step: leaves enter with
//! [`Graph::input`] (trainable) or [`Graph::constant`] (data), ops append
//! nodes in topological order, and [`Graph::backward`] walks the arena in
//! reverse to accumulate gradients.  Losses are `(1, 1, 1, 1)` tensors so
//! they stay inside the graph until the final scalar read.
//!
//! Every op constructor validates operand shapes and reports failures as
//! typed [`Error::Shape`] values naming the op and operand, so a mis-wired
//! model fails loudly at build time rather than deep inside a kernel.

use ndarray::{Array4, Axis, Zip};

use super::conv::{conv2d_backward, conv2d_forward, depthwise_backward, depthwise_forward};
use super::sample::{
    affine_to_flow, affine_to_flow_backward, bilinear_resize, bilinear_resize_backward,
    grid_warp, grid_warp_backward,
};
use super::{all_finite, shape_err, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId, T),
    MulScalar(TensorId, T),
    LeakyRelu(TensorId, T),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Abs(TensorId),
    MulMask(TensorId, TensorId),
    Concat(Vec<TensorId>),
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    BilinearResize(TensorId),
    GridWarp {
        x: TensorId,
        flow: TensorId,
    },
    AffineFlow(TensorId),
    MeanAll(TensorId),
    SumAll(TensorId),
    MeanSpatial(TensorId),
    SoftmaxChannel(TensorId),
    CrossEntropyMean {
        logits: TensorId,
        target: TensorId,
    },
    TvLoss(TensorId),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`TensorId`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor<T>> {
        self.slots[id.0].take()
    }
}

/// Reverse-mode autodiff arena.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// Verify that every op output is finite, at the cost of a full scan per
    /// op.  Tests and gradient checks enable this; training loops instead
    /// watch the loss scalar, which any non-finite value reaches through the
    /// mean/sum reductions.
    pub fn strict_finite(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize, usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Read a `(1, 1, 1, 1)` node as a plain scalar.
    pub fn scalar(&self, id: TensorId) -> T {
        debug_assert_eq!(self.shape(id), (1, 1, 1, 1), "scalar read of non-scalar node");
        self.nodes[id.0].value[[0, 0, 0, 0]]
    }

    /// Trainable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (data, targets, frozen features).
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Copy a node's value into a fresh non-trainable leaf, cutting the
    /// gradient path (used for generator outputs fed to the discriminator
    /// during its own update).
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> TensorId {
        if self.strict {
            assert!(
                all_finite(&value),
                "non-finite value out of op {:?} at node {}",
                op,
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<()> {
        let sa = self.value(a).dim();
        let sb = self.value(b).dim();
        if sa != sb {
            return Err(shape_err(
                op_name,
                "rhs",
                format!("{:?}", [sa.0, sa.1, sa.2, sa.3]),
                &[sb.0, sb.1, sb.2, sb.3],
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn add_scalar(&mut self, x: TensorId, k: T) -> TensorId {
        let v = self.value(x).mapv(|e| e + k);
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::AddScalar(x, k), g)
    }

    pub fn mul_scalar(&mut self, x: TensorId, k: T) -> TensorId {
        let v = self.value(x).mapv(|e| e * k);
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::MulScalar(x, k), g)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.leaky_relu(x, T::zero())
    }

    pub fn leaky_relu(&mut self, x: TensorId, alpha: T) -> TensorId {
        let v = self
            .value(x)
            .mapv(|e| if e > T::zero() { e } else { e * alpha });
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::LeakyRelu(x, alpha), g)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).mapv(|e| e.tanh());
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::Tanh(x), g)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let one = T::one();
        let v = self.value(x).mapv(|e| one / (one + (-e).exp()));
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::Sigmoid(x), g)
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).mapv(|e| e.abs());
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::Abs(x), g)
    }

    /// Broadcast-multiply `x` of shape `(N, C, H, W)` by a single-channel
    /// mask `(N, 1, H, W)`.
    pub fn mul_mask(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(x).dim();
        let ms = self.value(m).dim();
        if ms != (n, 1, h, w) {
            return Err(shape_err(
                "mul_mask",
                "mask",
                format!("{:?}", [n, 1, h, w]),
                &[ms.0, ms.1, ms.2, ms.3],
            ));
        }
        let mut v = Array4::zeros((n, c, h, w));
        {
            let xv = self.value(x);
            let mv = self.value(m);
            for ni in 0..n {
                let mplane = mv.index_axis(Axis(0), ni);
                let mplane = mplane.index_axis(Axis(0), 0);
                for ci in 0..c {
                    let xp = xv.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    let mut op = v.index_axis_mut(Axis(0), ni);
                    let mut op = op.index_axis_mut(Axis(0), ci);
                    Zip::from(&mut op).and(&xp).and(&mplane).for_each(|o, &a, &b| *o = a * b);
                }
            }
        }
        let g = self.any_grad(&[x, m]);
        Ok(self.push(v, Op::MulMask(x, m), g))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Argument {
                op: "concat",
                message: "needs at least one input".to_string(),
            });
        }
        let (n, _, h, w) = self.value(xs[0]).dim();
        for &x in xs {
            let s = self.value(x).dim();
            if (s.0, s.2, s.3) != (n, h, w) {
                return Err(shape_err(
                    "concat",
                    "input",
                    format!("[{n}, _, {h}, {w}]"),
                    &[s.0, s.1, s.2, s.3],
                ));
            }
        }
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("validated concat");
        let g = self.any_grad(xs);
        Ok(self.push(v, Op::Concat(xs.to_vec()), g))
    }

    /// Standard convolution with bias.  `w` is `(C_out, C_in, k, k)`,
    /// `b` is `(1, C_out, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (_, c_in, h, win) = self.value(x).dim();
        let (c_out, wc_in, kh, kw) = self.value(w).dim();
        if kh != kw {
            return Err(Error::Argument {
                op: "conv2d",
                message: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        if wc_in != c_in {
            return Err(shape_err(
                "conv2d",
                "weight",
                format!("[{c_out}, {c_in}, {kh}, {kw}]"),
                &[c_out, wc_in, kh, kw],
            ));
        }
        let bs = self.value(b).dim();
        if bs != (1, c_out, 1, 1) {
            return Err(shape_err(
                "conv2d",
                "bias",
                format!("[1, {c_out}, 1, 1]"),
                &[bs.0, bs.1, bs.2, bs.3],
            ));
        }
        if h + 2 * pad < kh || win + 2 * pad < kw {
            return Err(Error::Argument {
                op: "conv2d",
                message: format!("input {h}x{win} too small for kernel {kh} pad {pad}"),
            });
        }
        let v = {
            let xv = self.value(x);
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            conv2d_forward(xv, wv, Some(bv), stride, pad)
        };
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, g))
    }

    /// Depthwise convolution (no bias).  `w` is `(C, 1, k, k)`.
    pub fn depthwise(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (_, c_in, _, _) = self.value(x).dim();
        let (wc, one, kh, kw) = self.value(w).dim();
        if wc != c_in || one != 1 || kh != kw {
            return Err(shape_err(
                "depthwise",
                "weight",
                format!("[{c_in}, 1, k, k]"),
                &[wc, one, kh, kw],
            ));
        }
        let v = {
            let xv = self.value(x);
            let wv = &self.nodes[w.0].value;
            depthwise_forward(xv, wv, stride, pad)
        };
        let g = self.any_grad(&[x, w]);
        Ok(self.push(v, Op::Depthwise { x, w, stride, pad }, g))
    }

    /// Bilinear resize to `(out_h, out_w)` with half-pixel centers.
    pub fn bilinear_resize(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument {
                op: "bilinear_resize",
                message: "target size must be positive".to_string(),
            });
        }
        let v = bilinear_resize(self.value(x), out_h, out_w);
        let g = self.nodes[x.0].needs_grad;
        Ok(self.push(v, Op::BilinearResize(x), g))
    }

    /// Warp `x` by a dense backward flow `(N, 2, H, W)`.
    pub fn grid_warp(&mut self, x: TensorId, flow: TensorId) -> Result<TensorId> {
        let (n, _, h, w) = self.value(x).dim();
        let fs = self.value(flow).dim();
        if fs != (n, 2, h, w) {
            return Err(shape_err(
                "grid_warp",
                "flow",
                format!("[{n}, 2, {h}, {w}]"),
                &[fs.0, fs.1, fs.2, fs.3],
            ));
        }
        let v = grid_warp(self.value(x), self.value(flow));
        let g = self.any_grad(&[x, flow]);
        Ok(self.push(v, Op::GridWarp { x, flow }, g))
    }

    /// Expand `(N, 6, 1, 1)` affine deltas into a dense `(N, 2, h, w)` flow.
    pub fn affine_flow(&mut self, params: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let ps = self.value(params).dim();
        if ps.1 != 6 || ps.2 != 1 || ps.3 != 1 {
            return Err(shape_err(
                "affine_flow",
                "params",
                format!("[{}, 6, 1, 1]", ps.0),
                &[ps.0, ps.1, ps.2, ps.3],
            ));
        }
        let v = affine_to_flow(self.value(params), h, w);
        let g = self.nodes[params.0].needs_grad;
        Ok(self.push(v, Op::AffineFlow(params), g))
    }

    /// Mean over all elements, as a `(1, 1, 1, 1)` node.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let n = T::from_usize(xv.len()).unwrap();
        let mut s = T::zero();
        for v in xv.iter() {
            s += *v;
        }
        let v = Array4::from_elem((1, 1, 1, 1), s / n);
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::MeanAll(x), g)
    }

    /// Sum over all elements, as a `(1, 1, 1, 1)` node.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = T::zero();
        for v in self.value(x).iter() {
            s += *v;
        }
        let v = Array4::from_elem((1, 1, 1, 1), s);
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::SumAll(x), g)
    }

    /// Global average pool: `(N, C, H, W)` to `(N, C, 1, 1)`.
    pub fn mean_spatial(&mut self, x: TensorId) -> TensorId {
        let (n, c, h, w) = self.value(x).dim();
        let scale = T::one() / T::from_usize(h * w).unwrap();
        let mut v = Array4::zeros((n, c, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = T::zero();
                let xv = self.value(x);
                for e in xv.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    s += *e;
                }
                v[[ni, ci, 0, 0]] = s * scale;
            }
        }
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::MeanSpatial(x), g)
    }

    /// Channel-wise softmax at every pixel.
    pub fn softmax_channel(&mut self, x: TensorId) -> TensorId {
        let v = softmax_channel_value(self.value(x));
        let g = self.nodes[x.0].needs_grad;
        self.push(v, Op::SoftmaxChannel(x), g)
    }

    /// Mean cross-entropy between channel-softmaxed `logits` and a target
    /// probability map of the same shape.  Gradients flow to `logits` only.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, target: TensorId) -> Result<TensorId> {
        self.binary_same_shape("cross_entropy_mean", logits, target)?;
        if self.nodes[target.0].needs_grad {
            return Err(Error::Argument {
                op: "cross_entropy_mean",
                message: "target must not require gradients".to_string(),
            });
        }
        let (n, c, h, w) = self.value(logits).dim();
        let lv = self.value(logits);
        let tv = self.value(target);
        let mut total = T::zero();
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut maxv = lv[[ni, 0, y, x]];
                    for ci in 1..c {
                        maxv = maxv.max(lv[[ni, ci, y, x]]);
                    }
                    let mut lse = T::zero();
                    for ci in 0..c {
                        lse += (lv[[ni, ci, y, x]] - maxv).exp();
                    }
                    let lse = lse.ln() + maxv;
                    for ci in 0..c {
                        total += tv[[ni, ci, y, x]] * (lse - lv[[ni, ci, y, x]]);
                    }
                }
            }
        }
        let scale = T::one() / T::from_usize(n * h * w).unwrap();
        let v = Array4::from_elem((1, 1, 1, 1), total * scale);
        let g = self.nodes[logits.0].needs_grad;
        Ok(self.push(v, Op::CrossEntropyMean { logits, target }, g))
    }

    /// Total-variation loss: the sum of absolute forward differences along x
    /// and y over all channels, averaged over the batch dimension.
    pub fn tv_loss(&mut self, flow: TensorId) -> TensorId {
        let v = Array4::from_elem((1, 1, 1, 1), tv_value(self.value(flow)));
        let g = self.nodes[flow.0].needs_grad;
        self.push(v, Op::TvLoss(flow), g)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: TensorId) -> Result<Grads<T>> {
        if self.shape(loss) != (1, 1, 1, 1) {
            let s = self.shape(loss);
            return Err(shape_err(
                "backward",
                "loss",
                "[1, 1, 1, 1]",
                &[s.0, s.1, s.2, s.3],
            ));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), T::one()));

        for i in (0..self.nodes.len()).rev() {
            if slots[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = slots[i].take().unwrap();
            self.accumulate_parents(i, &g, &mut slots);
            // Leaf grads stay; interior grads are dropped to bound memory.
            if matches!(self.nodes[i].op, Op::Leaf) {
                slots[i] = Some(g);
            }
        }
        Ok(Grads { slots })
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                self.accum(slots, *a, ga);
                self.accum(slots, *b, gb);
            }
            Op::AddScalar(x, _) => self.accum(slots, *x, g.clone()),
            Op::MulScalar(x, k) => self.accum(slots, *x, g.mapv(|e| e * *k)),
            Op::LeakyRelu(x, alpha) => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(xv).for_each(|gi, &xi| {
                    if xi <= T::zero() {
                        *gi *= *alpha;
                    }
                });
                self.accum(slots, *x, gx);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(y).for_each(|gi, &yi| *gi *= T::one() - yi * yi);
                self.accum(slots, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(y).for_each(|gi, &yi| *gi *= yi * (T::one() - yi));
                self.accum(slots, *x, gx);
            }
            Op::Abs(x) => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(xv).for_each(|gi, &xi| {
                    *gi = if xi > T::zero() {
                        *gi
                    } else if xi < T::zero() {
                        -*gi
                    } else {
                        T::zero()
                    };
                });
                self.accum(slots, *x, gx);
            }
            Op::MulMask(x, m) => {
                let (n, c, h, w) = self.nodes[x.0].value.dim();
                let xv = &self.nodes[x.0].value;
                let mv = &self.nodes[m.0].value;
                if self.nodes[x.0].needs_grad {
                    let mut gx = Array4::zeros((n, c, h, w));
                    for ni in 0..n {
                        let mp = mv.index_axis(Axis(0), ni);
                        let mp = mp.index_axis(Axis(0), 0);
                        for ci in 0..c {
                            let gp = g.index_axis(Axis(0), ni);
                            let gp = gp.index_axis(Axis(0), ci);
                            let mut o = gx.index_axis_mut(Axis(0), ni);
                            let mut o = o.index_axis_mut(Axis(0), ci);
                            Zip::from(&mut o).and(&gp).and(&mp).for_each(|oo, &a, &b| *oo = a * b);
                        }
                    }
                    self.accum(slots, *x, gx);
                }
                if self.nodes[m.0].needs_grad {
                    let mut gm = Array4::zeros((n, 1, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gp = g.index_axis(Axis(0), ni);
                            let gp = gp.index_axis(Axis(0), ci);
                            let xp = xv.index_axis(Axis(0), ni);
                            let xp = xp.index_axis(Axis(0), ci);
                            let mut o = gm.index_axis_mut(Axis(0), ni);
                            let mut o = o.index_axis_mut(Axis(0), 0);
                            Zip::from(&mut o).and(&gp).and(&xp).for_each(|oo, &a, &b| *oo += a * b);
                        }
                    }
                    self.accum(slots, *m, gm);
                }
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = self.nodes[x.0].value.dim().1;
                    let gx = g.slice(ndarray::s![.., start..start + c, .., ..]).to_owned();
                    self.accum(slots, x, gx);
                    start += c;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let (dx, dw, db) = conv2d_backward(
                    g,
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    *stride,
                    *pad,
                    need_dx,
                );
                if let Some(dx) = dx {
                    self.accum(slots, *x, dx);
                }
                self.accum(slots, *w, dw);
                self.accum(slots, *b, db);
            }
            Op::Depthwise { x, w, stride, pad } => {
                let (dx, dw) = depthwise_backward(
                    g,
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    *stride,
                    *pad,
                );
                self.accum(slots, *x, dx);
                self.accum(slots, *w, dw);
            }
            Op::BilinearResize(x) => {
                let (_, _, h, w) = self.nodes[x.0].value.dim();
                let gx = bilinear_resize_backward(g, h, w);
                self.accum(slots, *x, gx);
            }
            Op::GridWarp { x, flow } => {
                let (gx, gf) = grid_warp_backward(g, &self.nodes[x.0].value, &self.nodes[flow.0].value);
                self.accum(slots, *x, gx);
                self.accum(slots, *flow, gf);
            }
            Op::AffineFlow(p) => {
                let gp = affine_to_flow_backward(g);
                self.accum(slots, *p, gp);
            }
            Op::MeanAll(x) => {
                let xv = &self.nodes[x.0].value;
                let k = g[[0, 0, 0, 0]] / T::from_usize(xv.len()).unwrap();
                self.accum(slots, *x, Array4::from_elem(xv.raw_dim(), k));
            }
            Op::SumAll(x) => {
                let xv = &self.nodes[x.0].value;
                let k = g[[0, 0, 0, 0]];
                self.accum(slots, *x, Array4::from_elem(xv.raw_dim(), k));
            }
            Op::MeanSpatial(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dim();
                let scale = T::one() / T::from_usize(h * w).unwrap();
                let mut gx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let k = g[[ni, ci, 0, 0]] * scale;
                        gx.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .fill(k);
                    }
                }
                self.accum(slots, *x, gx);
            }
            Op::SoftmaxChannel(x) => {
                let y = &node.value;
                let (n, c, h, w) = y.dim();
                let mut gx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for yy in 0..h {
                        for xx in 0..w {
                            let mut dot = T::zero();
                            for ci in 0..c {
                                dot += g[[ni, ci, yy, xx]] * y[[ni, ci, yy, xx]];
                            }
                            for ci in 0..c {
                                gx[[ni, ci, yy, xx]] =
                                    y[[ni, ci, yy, xx]] * (g[[ni, ci, yy, xx]] - dot);
                            }
                        }
                    }
                }
                self.accum(slots, *x, gx);
            }
            Op::CrossEntropyMean { logits, target } => {
                let lv = &self.nodes[logits.0].value;
                let tv = &self.nodes[target.0].value;
                let (n, _, h, w) = lv.dim();
                let scale = g[[0, 0, 0, 0]] / T::from_usize(n * h * w).unwrap();
                let mut p = softmax_channel_value(lv);
                Zip::from(&mut p).and(tv).for_each(|pi, &ti| *pi = (*pi - ti) * scale);
                self.accum(slots, *logits, p);
            }
            Op::TvLoss(flow) => {
                let fv = &self.nodes[flow.0].value;
                let (n, c, h, w) = fv.dim();
                let scale = g[[0, 0, 0, 0]] / T::from_usize(n).unwrap();
                let mut gf = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                if x + 1 < w {
                                    let d = fv[[ni, ci, y, x + 1]] - fv[[ni, ci, y, x]];
                                    let s = sign(d) * scale;
                                    gf[[ni, ci, y, x + 1]] += s;
                                    gf[[ni, ci, y, x]] -= s;
                                }
                                if y + 1 < h {
                                    let d = fv[[ni, ci, y + 1, x]] - fv[[ni, ci, y, x]];
                                    let s = sign(d) * scale;
                                    gf[[ni, ci, y + 1, x]] += s;
                                    gf[[ni, ci, y, x]] -= s;
                                }
                            }
                        }
                    }
                }
                self.accum(slots, *flow, gf);
            }
        }
    }

    fn accum(&self, slots: &mut [Option<Tensor<T>>], id: TensorId, g: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn softmax_channel_value<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut maxv = x[[ni, 0, y, xx]];
                for ci in 1..c {
                    maxv = maxv.max(x[[ni, ci, y, xx]]);
                }
                let mut sum = T::zero();
                for ci in 0..c {
                    let e = (x[[ni, ci, y, xx]] - maxv).exp();
                    out[[ni, ci, y, xx]] = e;
                    sum += e;
                }
                for ci in 0..c {
                    out[[ni, ci, y, xx]] = out[[ni, ci, y, xx]] / sum;
                }
            }
        }
    }
    out
}

/// Total-variation value of a flow/feature stack: per-sample sum of absolute
/// forward differences along both axes and all channels, batch-averaged.
pub fn tv_value<T: Scalar>(f: &Tensor<T>) -> T {
    let (n, c, h, w) = f.dim();
    let mut total = T::zero();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        total += (f[[ni, ci, y, x + 1]] - f[[ni, ci, y, x]]).abs();
                    }
                    if y + 1 < h {
                        total += (f[[ni, ci, y + 1, x]] - f[[ni, ci, y, x]]).abs();
                    }
                }
            }
        }
    }
    total / T::from_usize(n).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn rng_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn tv_loss_matches_hand_computed_example() {
        // 2x2 field, x-channel rows [0, 1; 0, 1], y-channel zero:
        // x-diffs contribute |1| + |1| = 2, y-diffs are zero.
        let mut f = Array4::zeros((1, 2, 2, 2));
        f[[0, 0, 0, 1]] = 1.0;
        f[[0, 0, 1, 1]] = 1.0;
        assert_eq!(tv_value(&f), 2.0);

        let mut g = Graph::<f64>::new().strict_finite();
        let fid = g.input(f);
        let loss = g.tv_loss(fid);
        assert_eq!(g.scalar(loss), 2.0);
    }

    #[test]
    fn tv_loss_averages_over_the_batch() {
        let mut f = Array4::zeros((2, 2, 2, 2));
        f[[0, 0, 0, 1]] = 1.0;
        f[[0, 0, 1, 1]] = 1.0;
        // Second sample has double the variation.
        f[[1, 0, 0, 1]] = 2.0;
        f[[1, 0, 1, 1]] = 2.0;
        assert_eq!(tv_value(&f), (2.0 + 4.0) / 2.0);
    }

    #[test]
    fn simple_chain_backward_produces_expected_gradient() {
        // loss = mean((2x + 1)^2), dloss/dx = 4 * (2x + 1) / numel.
        let x = rng_tensor((1, 1, 2, 2), 3);
        let mut g = Graph::<f64>::new().strict_finite();
        let xid = g.input(x.clone());
        let two_x = g.mul_scalar(xid, 2.0);
        let a = g.add_scalar(two_x, 1.0);
        let sq = g.mul(a, a).unwrap();
        let loss = g.mean_all(sq);
        let mut grads = g.backward(loss).unwrap();
        let gx = grads.take(xid).unwrap();
        for (xi, gi) in x.iter().zip(gx.iter()) {
            let want = 4.0 * (2.0 * xi + 1.0) / 4.0;
            assert!((gi - want).abs() < 1e-12, "got {gi}, want {want}");
        }
    }

    #[test]
    fn gradients_do_not_flow_into_constants() {
        let x = rng_tensor((1, 1, 2, 2), 4);
        let c = rng_tensor((1, 1, 2, 2), 5);
        let mut g = Graph::<f64>::new();
        let xid = g.input(x);
        let cid = g.constant(c);
        let m = g.mul(xid, cid).unwrap();
        let loss = g.mean_all(m);
        let mut grads = g.backward(loss).unwrap();
        assert!(grads.take(xid).is_some(), "trainable leaf receives a gradient");
        assert!(grads.take(cid).is_none(), "constant leaf receives none");
    }

    #[test]
    fn detach_cuts_the_gradient_path() {
        let x = rng_tensor((1, 1, 2, 2), 6);
        let mut g = Graph::<f64>::new();
        let xid = g.input(x);
        let d = g.detach(xid);
        let sq = g.mul(d, d).unwrap();
        let loss = g.mean_all(sq);
        let mut grads = g.backward(loss).unwrap();
        assert!(grads.take(xid).is_none(), "detached source must get no gradient");
    }

    #[test]
    fn softmax_channel_sums_to_one_and_ce_matches_manual_value() {
        let x = rng_tensor((2, 5, 3, 3), 7);
        let mut g = Graph::<f64>::new();
        let xid = g.input(x.clone());
        let sm = g.softmax_channel(xid);
        let sv = g.value(sm).clone();
        for ni in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    let s: f64 = (0..5).map(|c| sv[[ni, c, y, xx]]).sum();
                    assert!((s - 1.0).abs() < 1e-12, "softmax must normalize, got {s}");
                }
            }
        }

        // One-hot target on class 2 everywhere: CE = mean(-ln p_2).
        let mut t = Array4::zeros((2, 5, 3, 3));
        t.index_axis_mut(Axis(1), 2).fill(1.0);
        let tid = g.constant(t);
        let ce = g.cross_entropy_mean(xid, tid).unwrap();
        let mut manual = 0.0;
        for ni in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    manual -= sv[[ni, 2, y, xx]].ln();
                }
            }
        }
        manual /= 18.0;
        assert!((g.scalar(ce) - manual).abs() < 1e-10);
    }

    #[test]
    fn shape_errors_name_the_op_and_operand() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Array4::zeros((1, 2, 3, 3)));
        let b = g.input(Array4::zeros((1, 3, 3, 3)));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "error should name the op: {msg}");
        assert!(msg.contains("[1, 2, 3, 3]"), "error should state shapes: {msg}");

        let flow = g.input(Array4::zeros((1, 3, 3, 3)));
        let err = g.grid_warp(a, flow).unwrap_err();
        assert!(err.to_string().contains("grid_warp"), "{err}");
    }

    #[test]
    fn concat_backward_splits_gradients_by_channel() {
        let a = rng_tensor((1, 2, 2, 2), 8);
        let b = rng_tensor((1, 3, 2, 2), 9);
        let mut g = Graph::<f64>::new();
        let aid = g.input(a);
        let bid = g.input(b.clone());
        let cat = g.concat(&[aid, bid]).unwrap();
        assert_eq!(g.shape(cat), (1, 5, 2, 2));
        // loss = mean(cat * cat): each input's grad is 2 x / numel(cat).
        let sq = g.mul(cat, cat).unwrap();
        let loss = g.mean_all(sq);
        let mut grads = g.backward(loss).unwrap();
        let gb = grads.take(bid).unwrap();
        for (bi, gi) in b.iter().zip(gb.iter()) {
            assert!((gi - 2.0 * bi / 20.0).abs() < 1e-12);
        }
    }
}
