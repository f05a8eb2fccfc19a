// SPDX-License-Identifier: MIT OR Apache-2.0

//! The tape: nodes are appended in evaluation order, so the node index is a
//! topological order and `backward` is a single reverse sweep.

use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::AdError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise op is stretched over the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Row,
    Scalar,
}

#[derive(Debug)]
struct LstmCache {
    /// Post-activation gates, `B x 4H`, laid out `[i | f | g | o]`.
    gates: Tensor,
    /// `tanh(c')`, `B x H`.
    tanh_c: Tensor,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Offset(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Mean(Var),
    Sum(Var),
    Square(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Softplus(Var),
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        u: Var,
        b: Var,
        cache: Box<LstmCache>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-use computation graph. Build it forward, call [`Graph::backward`]
/// on a scalar output, drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node that reaches it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `shape` when the node does not reach the output.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast, AdError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::None)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else if b.shape() == (1, 1) {
        Ok(Broadcast::Scalar)
    } else {
        Err(AdError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    let cols = a.cols();
    let bd = b.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let bv = match mode {
            Broadcast::None => bd[i],
            Broadcast::Row => bd[i % cols],
            Broadcast::Scalar => bd[0],
        };
        *v = f(*v, bv);
    }
    out
}

/// Folds a full-shape gradient back onto a broadcast operand.
fn reduce_broadcast(grad: Tensor, mode: Broadcast) -> Tensor {
    match mode {
        Broadcast::None => grad,
        Broadcast::Row => grad.col_sums(),
        Broadcast::Scalar => Tensor::scalar(grad.sum()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs, parameters and constants all enter the tape as leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = matmul(av, bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a + b`; `b` may be a single row or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let mode = broadcast_kind("add", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), mode, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b, mode)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let mode = broadcast_kind("sub", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), mode, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b, mode)))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let mode = broadcast_kind("mul", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), mode, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b, mode)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// `a + constant`.
    pub fn offset(&mut self, a: Var, constant: f64) -> Var {
        let out = self.value(a).map(|v| v + constant);
        self.push(out, Op::Offset(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let Some(&first) = parts.first() else {
            return Err(AdError::ShapeMismatch {
                op: "concat",
                left: (0, 0),
                right: (0, 0),
            });
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    left: self.value(first).shape(),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `[start, end)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AdError> {
        let v = self.value(a);
        if start >= end || end > v.cols() {
            return Err(AdError::ShapeMismatch {
                op: "slice",
                left: v.shape(),
                right: (start, end),
            });
        }
        let out = v.slice_cols(start, end);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Mean over all entries, as a `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Sum over all entries, as a `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(elu);
        self.push(out, Op::Elu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// One LSTM step. `x: B x I`, `h, c: B x H`, `w: I x 4H`, `u: H x 4H`,
    /// `b: 1 x 4H`, gate blocks ordered input, forget, candidate, output.
    /// Returns `B x 2H` holding `[h' | c']`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        u: Var,
        b: Var,
    ) -> Result<Var, AdError> {
        let (xv, hv, cv) = (self.value(x), self.value(h), self.value(c));
        let (wv, uv, bv) = (self.value(w), self.value(u), self.value(b));
        let batch = xv.rows();
        let hidden = hv.cols();
        let mismatch = |left, right| AdError::ShapeMismatch {
            op: "lstm_cell",
            left,
            right,
        };
        if hv.rows() != batch || cv.shape() != hv.shape() {
            return Err(mismatch(hv.shape(), cv.shape()));
        }
        if wv.shape() != (xv.cols(), 4 * hidden) {
            return Err(mismatch(xv.shape(), wv.shape()));
        }
        if uv.shape() != (hidden, 4 * hidden) {
            return Err(mismatch(hv.shape(), uv.shape()));
        }
        if bv.shape() != (1, 4 * hidden) {
            return Err(mismatch((1, 4 * hidden), bv.shape()));
        }

        let mut gates = matmul(xv, wv);
        gates.add_assign(&matmul(hv, uv));
        let mut out = Tensor::zeros(batch, 2 * hidden);
        let mut tanh_c = Tensor::zeros(batch, hidden);
        let bias = bv.data();
        let four = 4 * hidden;
        {
            let gd = gates.data_mut();
            for r in 0..batch {
                let row = &mut gd[r * four..(r + 1) * four];
                for (j, g) in row.iter_mut().enumerate() {
                    let pre = *g + bias[j];
                    *g = if (2 * hidden..3 * hidden).contains(&j) {
                        pre.tanh()
                    } else {
                        sigmoid(pre)
                    };
                }
            }
        }
        for r in 0..batch {
            for j in 0..hidden {
                let i_g = gates.get(r, j);
                let f_g = gates.get(r, hidden + j);
                let g_g = gates.get(r, 2 * hidden + j);
                let o_g = gates.get(r, 3 * hidden + j);
                let c_new = f_g * cv.get(r, j) + i_g * g_g;
                let tc = c_new.tanh();
                tanh_c.set(r, j, tc);
                out.set(r, j, o_g * tc);
                out.set(r, hidden + j, c_new);
            }
        }
        let cache = Box::new(LstmCache { gates, tanh_c });
        Ok(self.push(
            out,
            Op::LstmCell {
                x,
                h,
                c,
                w,
                u,
                b,
                cache,
            },
        ))
    }

    /// Reverse sweep from a scalar `output`. The graph is not modified, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients, AdError> {
        let shape = self.value(output).shape();
        if shape != (1, 1) {
            return Err(AdError::NonScalarOutput { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b, mode) => {
                    accumulate(&mut grads, *b, reduce_broadcast(g.clone(), *mode));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b, mode) => {
                    let neg = g.map(|v| -v);
                    accumulate(&mut grads, *b, reduce_broadcast(neg, *mode));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b, mode) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = zip_broadcast(&g, bv, *mode, |gv, y| gv * y);
                    let mut gb_full = g;
                    for (gv, x) in gb_full.data_mut().iter_mut().zip(av.data()) {
                        *gv *= x;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, reduce_broadcast(gb_full, *mode));
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(offset, offset + w));
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut full = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            full.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let share = g.data()[0] / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), share));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::filled(av.rows(), av.cols(), g.data()[0]),
                    );
                }
                Op::Square(a) => {
                    let mut ga = g;
                    for (gv, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *gv *= 2.0 * x;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let mut ga = g;
                    for (gv, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if *x <= 0.0 {
                            *gv *= x.exp();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    for (gv, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *gv *= sigmoid(*x);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LstmCell {
                    x,
                    h,
                    c,
                    w,
                    u,
                    b,
                    cache,
                } => {
                    let cv = self.value(*c);
                    let hidden = cv.cols();
                    let batch = cv.rows();
                    let gates = &cache.gates;
                    let mut d_pre = Tensor::zeros(batch, 4 * hidden);
                    let mut d_c = Tensor::zeros(batch, hidden);
                    for r in 0..batch {
                        for j in 0..hidden {
                            let i_g = gates.get(r, j);
                            let f_g = gates.get(r, hidden + j);
                            let g_g = gates.get(r, 2 * hidden + j);
                            let o_g = gates.get(r, 3 * hidden + j);
                            let tc = cache.tanh_c.get(r, j);
                            let dh = g.get(r, j);
                            let dc_new = g.get(r, hidden + j) + dh * o_g * (1.0 - tc * tc);
                            let d_o = dh * tc;
                            let d_i = dc_new * g_g;
                            let d_g = dc_new * i_g;
                            let d_f = dc_new * cv.get(r, j);
                            d_c.set(r, j, dc_new * f_g);
                            d_pre.set(r, j, d_i * i_g * (1.0 - i_g));
                            d_pre.set(r, hidden + j, d_f * f_g * (1.0 - f_g));
                            d_pre.set(r, 2 * hidden + j, d_g * (1.0 - g_g * g_g));
                            d_pre.set(r, 3 * hidden + j, d_o * o_g * (1.0 - o_g));
                        }
                    }
                    let dx = matmul_nt(&d_pre, self.value(*w));
                    let dh_prev = matmul_nt(&d_pre, self.value(*u));
                    let dw = matmul_tn(self.value(*x), &d_pre);
                    let du = matmul_tn(self.value(*h), &d_pre);
                    let db = d_pre.col_sums();
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *h, dh_prev);
                    accumulate(&mut grads, *c, d_c);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *u, du);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
