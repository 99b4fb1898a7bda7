//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] appends one node to its [`Tape`]. Node ids are
//! assigned in recording order, so inputs always precede outputs and a single
//! reverse sweep over the ids visits each node exactly once.
//!
//! Leaf gradients accumulate across repeated [`Tape::backward`] calls until
//! [`Tape::zero_grad`] is called.

use std::cell::RefCell;

use super::kernels::{self, NormStats};
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        plan: MatPlan,
    },
    /// `b` broadcasts over the leading axes of `a`.
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    Relu { a: usize },
    Sum { a: usize },
    SoftmaxRows { a: usize },
    SoftmaxCols { a: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: NormStats,
    },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    ExpandBatch { a: usize },
    NllMean { probs: usize, labels: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
struct MatPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// 0 when `b` is shared by every batch item.
    b_stride: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between backward calls.
    grad: Option<Vec<f64>>,
}

/// Recording of a computation, replayed backwards to obtain gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Drops all accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) back to every reachable leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract("loss was recorded on a different tape"));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_updates.push((id, g));
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }

        for (id, g) in leaf_updates {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Applies the backward rule of node `id` given its output gradient `g`.
fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::MatMul { a, b, ta, tb, plan } => {
            let MatPlan {
                batch,
                m,
                k,
                n,
                b_stride,
            } = *plan;
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let mut da = vec![0.0; av.len()];
                for i in 0..batch {
                    let ai = &mut da[i * m * k..(i + 1) * m * k];
                    let bi = &bv[i * b_stride..i * b_stride + k * n];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if *ta {
                        kernels::gemm(k, n, m, bi, *tb, gi, true, ai, 1.0);
                    } else {
                        kernels::gemm(m, n, k, gi, false, bi, !*tb, ai, 1.0);
                    }
                }
                accumulate(grads, *a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; bv.len()];
                for i in 0..batch {
                    let bi = &mut db[i * b_stride..i * b_stride + k * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if *tb {
                        kernels::gemm(n, m, k, gi, true, ai, *ta, bi, 1.0);
                    } else {
                        kernels::gemm(k, m, n, ai, !*ta, gi, false, bi, 1.0);
                    }
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if wants(*b) {
                let bl = nodes[*b].value.len();
                let mut db = vec![0.0; bl];
                for (i, gv) in g.iter().enumerate() {
                    db[i % bl] += gv;
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let bl = bv.len();
            if wants(*a) {
                let da = g.iter().enumerate().map(|(i, gv)| gv * bv[i % bl]).collect();
                accumulate(grads, *a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; bl];
                for (i, gv) in g.iter().enumerate() {
                    db[i % bl] += gv * av[i];
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Scale { a, s } => {
            if wants(*a) {
                accumulate(grads, *a, g.iter().map(|v| v * s).collect());
            }
        }
        Op::Relu { a } => {
            if wants(*a) {
                let av = val(*a);
                let da = g
                    .iter()
                    .zip(av)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, da);
            }
        }
        Op::Sum { a } => {
            if wants(*a) {
                accumulate(grads, *a, vec![g[0]; nodes[*a].value.len()]);
            }
        }
        Op::SoftmaxRows { a } | Op::SoftmaxCols { a } => {
            if wants(*a) {
                let y = node.value.data();
                let shape = node.value.shape();
                let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut da = vec![0.0; y.len()];
                if matches!(node.op, Op::SoftmaxRows { .. }) {
                    kernels::softmax_rows_backward(y, g, rows, cols, &mut da);
                } else {
                    kernels::softmax_cols_backward(y, g, rows, cols, &mut da);
                }
                accumulate(grads, *a, da);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let xv = val(*x);
            let gv = val(*gain);
            let d = gv.len();
            let mut dx = wants(*x).then(|| vec![0.0; xv.len()]);
            let mut dg = wants(*gain).then(|| vec![0.0; d]);
            let mut db = wants(*bias).then(|| vec![0.0; d]);
            kernels::layer_norm_backward(
                xv,
                d,
                gv,
                stats,
                g,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dg) = dg {
                accumulate(grads, *gain, dg);
            }
            if let Some(db) = db {
                accumulate(grads, *bias, db);
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, inner) = outer_inner(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let ext = nodes[p].value.shape()[*axis];
                if wants(p) {
                    let mut dp = vec![0.0; nodes[p].value.len()];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        dp[o * ext * inner..(o + 1) * ext * inner]
                            .copy_from_slice(&g[src..src + ext * inner]);
                    }
                    accumulate(grads, p, dp);
                }
                offset += ext;
            }
        }
        Op::Slice { a, axis, start } => {
            if wants(*a) {
                let in_shape = nodes[*a].value.shape();
                let (outer, inner) = outer_inner(in_shape, *axis);
                let total = in_shape[*axis];
                let len = node.value.shape()[*axis];
                let mut da = vec![0.0; nodes[*a].value.len()];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    da[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, da);
            }
        }
        Op::Reshape { a } => {
            if wants(*a) {
                accumulate(grads, *a, g.to_vec());
            }
        }
        Op::Permute { a, axes } => {
            if wants(*a) {
                let inv = kernels::invert_axes(axes);
                let mut da = vec![0.0; g.len()];
                kernels::permute(g, node.value.shape(), &inv, &mut da);
                accumulate(grads, *a, da);
            }
        }
        Op::ExpandBatch { a } => {
            if wants(*a) {
                let l = nodes[*a].value.len();
                let mut da = vec![0.0; l];
                for chunk in g.chunks(l) {
                    da.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
                accumulate(grads, *a, da);
            }
        }
        Op::NllMean { probs, labels } => {
            if wants(*probs) {
                let pv = val(*probs);
                let classes = nodes[*probs].value.shape()[1];
                let b = labels.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let p = pv[i * classes + y];
                    if p > PROB_FLOOR {
                        dp[i * classes + y] = -g[0] / (b * p);
                    }
                }
                accumulate(grads, *probs, dp);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn matmul_impl(&self, other: &Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(other);
        let (value, plan) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            let mismatch = || Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            };
            if sa.len() < 2 || sb.len() < 2 {
                return Err(mismatch());
            }
            let (ra, rb) = (sa.len(), sb.len());
            let (m, k) = if ta {
                (sa[ra - 1], sa[ra - 2])
            } else {
                (sa[ra - 2], sa[ra - 1])
            };
            let (k2, n) = if tb {
                (sb[rb - 1], sb[rb - 2])
            } else {
                (sb[rb - 2], sb[rb - 1])
            };
            if k != k2 {
                return Err(mismatch());
            }
            let lead_a = &sa[..ra - 2];
            let lead_b = &sb[..rb - 2];
            let batch: usize = lead_a.iter().product();
            let plan = if lead_b.is_empty() {
                if ta {
                    MatPlan {
                        batch,
                        m,
                        k,
                        n,
                        b_stride: 0,
                    }
                } else {
                    // shared right operand: fold the batch into the rows
                    MatPlan {
                        batch: 1,
                        m: batch * m,
                        k,
                        n,
                        b_stride: 0,
                    }
                }
            } else if lead_a == lead_b {
                MatPlan {
                    batch,
                    m,
                    k,
                    n,
                    b_stride: k * n,
                }
            } else {
                return Err(mismatch());
            };
            let mut out = vec![0.0; batch * m * n];
            let (ad, bd) = (a.data(), b.data());
            let mk = plan.m * plan.k;
            let mn = plan.m * plan.n;
            for i in 0..plan.batch {
                kernels::gemm(
                    plan.m,
                    plan.k,
                    plan.n,
                    &ad[i * mk..(i + 1) * mk],
                    ta,
                    &bd[i * plan.b_stride..i * plan.b_stride + plan.k * plan.n],
                    tb,
                    &mut out[i * mn..(i + 1) * mn],
                    0.0,
                );
            }
            let mut shape = lead_a.to_vec();
            shape.extend([m, n]);
            (Tensor::new(shape, out)?, plan)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                plan,
            },
            rg,
        ))
    }

    /// `self · other` over the last two axes; `other` may be a shared 2-D matrix.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, true)
    }

    /// `selfᵀ · other` over the last two axes.
    pub fn matmul_tn(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true, false)
    }

    fn broadcast_binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if !a.shape().ends_with(b.shape()) {
                return Err(Error::Shape {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let bd = b.data();
            let bl = bd.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % bl]))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, make(self.id, other.id), rg))
    }

    /// Elementwise sum; `other` broadcasts over leading axes of `self`.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast_binary(other, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product; `other` broadcasts over leading axes of `self`.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast_binary(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.with_value(|t| t.map(|x| x * s));
        self.unary(v, Op::Scale { a: self.id, s })
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.with_value(|t| t.map(|x| x.max(0.0)));
        self.unary(v, Op::Relu { a: self.id })
    }

    /// Sum of all elements as a 1-element tensor.
    pub fn sum(&self) -> Var<'t> {
        let v = self.with_value(|t| Tensor::scalar(t.sum()));
        self.unary(v, Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with_value(|t| t.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    fn softmax_impl(&self, rows_wise: bool) -> Result<Var<'t>> {
        let v = self.with_value(|t| -> Result<Tensor> {
            let s = t.shape();
            let (rows, cols) = match s.len() {
                1 => (1, s[0]),
                r => (s[r - 2], s[r - 1]),
            };
            let mut out = vec![0.0; t.len()];
            if rows_wise {
                kernels::softmax_rows(t.data(), rows, cols, &mut out);
            } else {
                if s.len() < 2 {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "column softmax needs at least two axes".into(),
                    });
                }
                kernels::softmax_cols(t.data(), rows, cols, &mut out);
            }
            Tensor::new(s.to_vec(), out)
        })?;
        let op = if rows_wise {
            Op::SoftmaxRows { a: self.id }
        } else {
            Op::SoftmaxCols { a: self.id }
        };
        Ok(self.unary(v, op))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.softmax_impl(true)
    }

    /// Softmax along the second-to-last axis.
    pub fn softmax_cols(&self) -> Result<Var<'t>> {
        self.softmax_impl(false)
    }

    /// Normalises every vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (value, stats) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gain.id].value, &nodes[bias.id].value);
            let d = *x.shape().last().unwrap();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if eps <= 0.0 {
                return Err(contract("layer_norm eps must be positive"));
            }
            let mut out = vec![0.0; x.len()];
            let stats = kernels::layer_norm(x.data(), d, g.data(), b.data(), eps, &mut out);
            (Tensor::new(x.shape().to_vec(), out)?, stats)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
            rg,
        ))
    }

    /// `self · w + b` with `w` shared across leading axes.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add(b)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(contract(format!("concat axis {axis} out of range")));
            }
            let mut total = 0;
            for p in parts {
                first.same_tape(p);
                let s = nodes[p.id].value.shape();
                let agree = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !agree {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, inner) = outer_inner(&shape, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, out)?
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Sub-range `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.with_value(|t| -> Result<Tensor> {
            let s = t.shape();
            if axis >= s.len() || len == 0 || start + len > s[axis] {
                return Err(contract(format!(
                    "slice {start}..{} of axis {axis} out of range for {s:?}",
                    start + len
                )));
            }
            let (outer, inner) = outer_inner(s, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * s[axis] + start) * inner;
                out.extend_from_slice(&t.data()[src..src + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(shape, out)
        })?;
        Ok(self.unary(
            v,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.reshape(shape))?;
        Ok(self.unary(v, Op::Reshape { a: self.id }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.permute(axes))?;
        Ok(self.unary(
            v,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(contract("transpose needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Repeats the value along a new leading axis of extent `batch`.
    pub fn expand_batch(&self, batch: usize) -> Result<Var<'t>> {
        let v = self.with_value(|t| -> Result<Tensor> {
            let mut shape = vec![batch];
            shape.extend_from_slice(t.shape());
            let mut data = Vec::with_capacity(batch * t.len());
            for _ in 0..batch {
                data.extend_from_slice(t.data());
            }
            Tensor::new(shape, data)
        })?;
        Ok(self.unary(v, Op::ExpandBatch { a: self.id }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise probabilities `[B, C]`.
    pub fn nll_mean(&self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|t| -> Result<Tensor> {
            let s = t.shape();
            if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
                return Err(contract(format!(
                    "nll expects [batch, classes] probabilities for {} labels, got {s:?}",
                    labels.len()
                )));
            }
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= s[1] {
                    return Err(contract(format!("label {y} out of range for {} classes", s[1])));
                }
                total -= t.data()[i * s[1] + y].max(PROB_FLOOR).ln();
            }
            Ok(Tensor::scalar(total / labels.len() as f64))
        })?;
        Ok(self.unary(
            v,
            Op::NllMean {
                probs: self.id,
                labels: labels.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new([2, 3], vec![0.5; 6]).unwrap());
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, -1.0]).unwrap());
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[&[1.0, 2.0]]));
        let c = tape.constant(t(&[&[3.0], &[4.0]]));
        tape.backward(x.matmul(&c).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn self_product_gradient() {
        // d/dx sum(x xᵀ) = 2 * column sums broadcast
        let tape = Tape::new();
        let x = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        tape.backward(x.matmul_nt(&x).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[8.0, 12.0, 8.0, 12.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros([2, 3]).unwrap());
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new([2, 1, 3], (0..6).map(f64::from).collect()).unwrap());
        let b = tape.param(Tensor::new([2, 2, 3], (6..18).map(f64::from).collect()).unwrap());
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        assert_eq!(c.slice(1, 0, 1).unwrap().value(), a.value());
        assert_eq!(c.slice(1, 1, 2).unwrap().value(), b.value());
        let w = tape.constant(Tensor::new([2, 3, 3], (0..18).map(f64::from).collect()).unwrap());
        tape.backward(c.mul(&w).unwrap().sum()).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 1.0, 2.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn nll_rejects_bad_labels() {
        let tape = Tape::new();
        let p = tape.constant(t(&[&[0.5, 0.5]]));
        assert!(p.nll_mean(&[2]).is_err());
        assert!(p.nll_mean(&[]).is_err());
        assert!((p.nll_mean(&[1]).unwrap().value().item() - 2f64.ln()).abs() < 1e-15);
    }
}
