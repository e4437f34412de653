//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every backward rule is itself written with graph operations, so the
//! gradients returned by [`Graph::grad`] are ordinary nodes that can be
//! differentiated again. Gradient inversion needs this: the attack loss is a
//! function of parameter gradients, and the attacker differentiates it with
//! respect to the input.
//!
//! Piecewise-linear operations (ReLU, total variation) record their local
//! derivative as a constant mask. Their second derivative is zero almost
//! everywhere, so the mask being constant is exact.

pub mod kernels;

pub use kernels::ConvGeom;

use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Powf(Var, f64),
    Relu(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvInputGrad { g: Var, w: Var, geom: ConvGeom },
    ConvWeightGrad { x: Var, g: Var, geom: ConvGeom },
    BroadcastBias(Var),
    ReduceBias(Var),
    SumAll(Var),
    BroadcastScalar(Var),
    Reshape(Var),
    LogSoftmax(Var),
    RowSumBroadcast(Var),
    SliceCols { a: Var, start: usize },
    PadCols { a: Var, start: usize },
    TotalVariation { x: Var, wx: f64, wy: f64 },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Conv { x, w, .. } => [Some(x), Some(w)],
            ConvInputGrad { g, w, .. } => [Some(g), Some(w)],
            ConvWeightGrad { x, g, .. } => [Some(x), Some(g)],
            Neg(a)
            | Scale(a, _)
            | Offset(a)
            | Exp(a)
            | Powf(a, _)
            | Relu(a)
            | BroadcastBias(a)
            | ReduceBias(a)
            | SumAll(a)
            | BroadcastScalar(a)
            | Reshape(a)
            | LogSoftmax(a)
            | RowSumBroadcast(a)
            | TotalVariation { x: a, .. } => [Some(a), None],
            SliceCols { a, .. } | PadCols { a, .. } => [Some(a), None],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// A tape of tensor operations. Values are computed eagerly as nodes are
/// added; a graph is built per evaluation and dropped afterwards.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input, parameter or constant. Whether a leaf receives a gradient is
    /// decided by the `wrt` list passed to [`Graph::grad`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(T::of(value)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        let v = self.value(a).map(|x| x * cc);
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        let v = self.value(a).map(|x| x + cc);
        self.push(v, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let pp = T::of(p);
        let v = self.value(a).map(|x| x.powf(pp));
        self.push(v, Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    /// `op(a) * op(b)` for rank-2 operands; `ta`/`tb` transpose the stored
    /// matrices.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs rank-2 operands: {sa:?} {sb:?}");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimension: {sa:?} {sb:?} ta={ta} tb={tb}");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, out.data_mut(), false);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let v = kernels::conv2d(self.value(x), self.value(w), geom);
        self.push(v, Op::Conv { x, w, geom })
    }

    fn conv_input_grad(&mut self, g: Var, w: Var, geom: ConvGeom, in_hw: (usize, usize)) -> Var {
        let v = kernels::conv_input_grad(self.value(g), self.value(w), geom, in_hw);
        self.push(v, Op::ConvInputGrad { g, w, geom })
    }

    fn conv_weight_grad(&mut self, x: Var, g: Var, geom: ConvGeom, k: usize) -> Var {
        let v = kernels::conv_weight_grad(self.value(x), self.value(g), geom, k);
        self.push(v, Op::ConvWeightGrad { x, g, geom })
    }

    /// Broadcast a per-channel vector `[C]` over a tensor shaped `[N, C, ...]`.
    pub fn broadcast_bias(&mut self, b: Var, shape: &[usize]) -> Var {
        let c = shape[1];
        assert_eq!(self.shape(b), &[c], "bias length");
        let inner: usize = shape[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut out = Tensor::zeros(shape);
        for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            chunk.fill(bias[chunk_idx % c]);
        }
        self.push(out, Op::BroadcastBias(b))
    }

    /// Sum a `[N, C, ...]` tensor down to `[C]`.
    pub fn reduce_bias(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out = Tensor::zeros(&[c]);
        for (chunk_idx, chunk) in self.nodes[x.0].value.data().chunks(inner).enumerate() {
            let s: T = chunk.iter().copied().sum();
            out.data_mut()[chunk_idx % c] += s;
        }
        self.push(out, Op::ReduceBias(x))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast_bias(b, &shape);
        self.add(x, bb)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn broadcast_scalar(&mut self, s: Var, shape: &[usize]) -> Var {
        let v = self.value(s).item();
        self.push(Tensor::full(shape, v), Op::BroadcastScalar(s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Row-wise log-softmax of a `[N, K]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = kernels::log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    /// Each entry replaced by the sum of its row (`[N, K]`).
    pub fn row_sum_broadcast(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.shape()[1];
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let s: T = row.iter().copied().sum();
            row.fill(s);
        }
        self.push(out, Op::RowSumBroadcast(a))
    }

    /// Columns `start..start+len` of a `[N, K]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let (rows, cols) = (src.shape()[0], src.shape()[1]);
        assert!(start + len <= cols);
        let mut data = Vec::with_capacity(rows * len);
        for row in src.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::from_parts(vec![rows, len], data), Op::SliceCols { a, start })
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let src = self.value(a);
        let (rows, len) = (src.shape()[0], src.shape()[1]);
        let mut out = Tensor::zeros(&[rows, total]);
        for (r, row) in src.data().chunks(len).enumerate() {
            out.data_mut()[r * total + start..r * total + start + len].copy_from_slice(row);
        }
        self.push(out, Op::PadCols { a, start })
    }

    /// Anisotropic total variation of an `N x C x H x W` tensor.
    pub fn total_variation(&mut self, x: Var) -> Var {
        self.total_variation_weighted(x, 1.0, 1.0)
    }

    /// `wx * sum|horizontal diffs| + wy * sum|vertical diffs|`.
    pub fn total_variation_weighted(&mut self, x: Var, wx: f64, wy: f64) -> Var {
        let (tv, _) = kernels::total_variation(self.value(x), T::of(wx), T::of(wy));
        self.push(Tensor::scalar(tv), Op::TotalVariation { x, wx, wy })
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], need: &[bool], target: Var, g: Var) {
        if !need[target.0] {
            return;
        }
        grads[target.0] = Some(match grads[target.0] {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }

    /// Gradients of the scalar `out` with respect to each of `wrt`.
    ///
    /// The returned nodes live on this graph, so they can be used in further
    /// computation and differentiated again. Leaves that `out` does not
    /// depend on get a zero constant.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(out).len(), 1, "grad of a non-scalar");
        let n = out.0 + 1;
        let mut need = vec![false; n];
        for w in wrt {
            if w.0 < n {
                need[w.0] = true;
            }
        }
        for i in 0..n {
            if !need[i] {
                need[i] = self.nodes[i].op.inputs().iter().flatten().any(|v| need[v.0]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        let out_shape = self.shape(out).to_vec();
        grads[out.0] = Some(self.leaf(Tensor::full(&out_shape, T::one())));

        for i in (0..n).rev() {
            if !need[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            self.backward(Var(i), op, g, &need, &mut grads);
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.leaf(Tensor::zeros(&shape))
                }
            })
            .collect()
    }

    fn backward(&mut self, node: Var, op: Op, g: Var, need: &[bool], grads: &mut [Option<Var>]) {
        use Op::*;
        match op {
            Leaf => {}
            Add(a, b) => {
                self.accumulate(grads, need, a, g);
                self.accumulate(grads, need, b, g);
            }
            Sub(a, b) => {
                self.accumulate(grads, need, a, g);
                if need[b.0] {
                    let ng = self.neg(g);
                    self.accumulate(grads, need, b, ng);
                }
            }
            Mul(a, b) => {
                if need[a.0] {
                    let ga = self.mul(g, b);
                    self.accumulate(grads, need, a, ga);
                }
                if need[b.0] {
                    let gb = self.mul(g, a);
                    self.accumulate(grads, need, b, gb);
                }
            }
            Neg(a) => {
                let ga = self.neg(g);
                self.accumulate(grads, need, a, ga);
            }
            Scale(a, c) => {
                let ga = self.scale(g, c);
                self.accumulate(grads, need, a, ga);
            }
            Offset(a) => self.accumulate(grads, need, a, g),
            Exp(a) => {
                let ga = self.mul(g, node);
                self.accumulate(grads, need, a, ga);
            }
            Powf(a, p) => {
                let d = self.powf(a, p - 1.0);
                let d = self.scale(d, p);
                let ga = self.mul(g, d);
                self.accumulate(grads, need, a, ga);
            }
            Relu(a) => {
                let mask = self.value(a).map(|x| if x > T::zero() { T::one() } else { T::zero() });
                let mask = self.leaf(mask);
                let ga = self.mul(g, mask);
                self.accumulate(grads, need, a, ga);
            }
            MatMul { a, b, ta, tb } => {
                // C = op(A) op(B); each case keeps the result stored like A / B.
                if need[a.0] {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul(g, b, false, true),
                        (false, true) => self.matmul(g, b, false, false),
                        (true, false) => self.matmul(b, g, false, true),
                        (true, true) => self.matmul(b, g, true, true),
                    };
                    self.accumulate(grads, need, a, ga);
                }
                if need[b.0] {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul(a, g, true, false),
                        (false, true) => self.matmul(g, a, true, false),
                        (true, false) => self.matmul(a, g, false, false),
                        (true, true) => self.matmul(g, a, true, true),
                    };
                    self.accumulate(grads, need, b, gb);
                }
            }
            Conv { x, w, geom } => {
                if need[x.0] {
                    let s = self.shape(x);
                    let in_hw = (s[2], s[3]);
                    let gx = self.conv_input_grad(g, w, geom, in_hw);
                    self.accumulate(grads, need, x, gx);
                }
                if need[w.0] {
                    let k = self.shape(w)[2];
                    let gw = self.conv_weight_grad(x, g, geom, k);
                    self.accumulate(grads, need, w, gw);
                }
            }
            ConvInputGrad { g: up, w, geom, .. } => {
                // out = d<up, conv(X, w)>/dX, bilinear in (up, w).
                if need[up.0] {
                    let gu = self.conv2d(g, w, geom);
                    self.accumulate(grads, need, up, gu);
                }
                if need[w.0] {
                    let k = self.shape(w)[2];
                    let gw = self.conv_weight_grad(g, up, geom, k);
                    self.accumulate(grads, need, w, gw);
                }
            }
            ConvWeightGrad { x, g: up, geom, .. } => {
                // out = d<up, conv(x, W)>/dW, bilinear in (x, up).
                if need[x.0] {
                    let s = self.shape(x);
                    let in_hw = (s[2], s[3]);
                    let gx = self.conv_input_grad(up, g, geom, in_hw);
                    self.accumulate(grads, need, x, gx);
                }
                if need[up.0] {
                    let gu = self.conv2d(x, g, geom);
                    self.accumulate(grads, need, up, gu);
                }
            }
            BroadcastBias(b) => {
                let gb = self.reduce_bias(g);
                self.accumulate(grads, need, b, gb);
            }
            ReduceBias(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.broadcast_bias(g, &shape);
                self.accumulate(grads, need, x, gx);
            }
            SumAll(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.broadcast_scalar(g, &shape);
                self.accumulate(grads, need, a, ga);
            }
            BroadcastScalar(s) => {
                let gs = self.sum_all(g);
                let shape = self.shape(s).to_vec();
                let gs = if shape.is_empty() { gs } else { self.reshape(gs, &shape) };
                self.accumulate(grads, need, s, gs);
            }
            Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(g, &shape);
                self.accumulate(grads, need, a, ga);
            }
            LogSoftmax(a) => {
                // d/dx = g - softmax(x) * rowsum(g)
                let p = self.exp(node);
                let rs = self.row_sum_broadcast(g);
                let t = self.mul(p, rs);
                let ga = self.sub(g, t);
                self.accumulate(grads, need, a, ga);
            }
            RowSumBroadcast(a) => {
                let ga = self.row_sum_broadcast(g);
                self.accumulate(grads, need, a, ga);
            }
            SliceCols { a, start } => {
                let total = self.shape(a)[1];
                let ga = self.pad_cols(g, start, total);
                self.accumulate(grads, need, a, ga);
            }
            PadCols { a, start } => {
                let len = self.shape(a)[1];
                let ga = self.slice_cols(g, start, len);
                self.accumulate(grads, need, a, ga);
            }
            TotalVariation { x, wx, wy } => {
                let (_, sub) = kernels::total_variation(self.value(x), T::of(wx), T::of(wy));
                let shape = sub.shape().to_vec();
                let sub = self.leaf(sub);
                let gb = self.broadcast_scalar(g, &shape);
                let gx = self.mul(gb, sub);
                self.accumulate(grads, need, x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests;
