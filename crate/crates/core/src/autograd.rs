//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its variables in
//! topological order. [`Tape::backward`] walks the record once in reverse,
//! applying each node's backward rule, and accumulates into the gradient
//! buffers of leaf variables. Build a fresh tape for every forward pass.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, sum_to_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Sqrt,
    Exp,
    Log,
    Relu,
    Neg,
}

impl ElementwiseOp {
    fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Div => "div",
            ElementwiseOp::Sqrt => "sqrt",
            ElementwiseOp::Exp => "exp",
            ElementwiseOp::Log => "log",
            ElementwiseOp::Relu => "relu",
            ElementwiseOp::Neg => "neg",
        }
    }

    fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Binary(ElementwiseOp, Var, Var),
    Unary(ElementwiseOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Sum(Var),
    MeanAxis { input: Var, axis: usize },
    Reshape(Var),
    Mask(Var, Vec<f64>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // only leaves keep a persistent gradient buffer
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
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

    /// A differentiable input; its gradient is kept after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies `v`'s value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Applies an elementwise operation. Binary kinds need `b`; unary kinds reject it.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            (true, None) => Err(Error::invalid(format!("{} needs two operands", kind.name()))),
            (false, Some(_)) => Err(Error::invalid(format!("{} takes one operand", kind.name()))),
        }
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let op = kind.name();
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape =
            broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        let f: fn(f64, f64) -> f64 = match kind {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
            ElementwiseOp::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        if kind == ElementwiseOp::Div && tb.data().iter().any(|&y| y == 0.0) {
            return Err(Error::Domain {
                op,
                detail: "division by zero".into(),
            });
        }
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            data
        };
        let value = Tensor::new(out_shape, data)?;
        check_finite(op, &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    fn unary(&mut self, kind: ElementwiseOp, a: Var) -> Result<Var> {
        let op = kind.name();
        let ta = self.value(a);
        if matches!(kind, ElementwiseOp::Sqrt | ElementwiseOp::Log) {
            if let Some(bad) = ta.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op,
                    detail: format!("requires strictly positive input, got {bad}"),
                });
            }
        }
        let value = match kind {
            ElementwiseOp::Sqrt => ta.map(f64::sqrt),
            ElementwiseOp::Exp => ta.map(f64::exp),
            ElementwiseOp::Log => ta.map(f64::ln),
            ElementwiseOp::Relu => ta.map(|v| if v > 0.0 { v } else { 0.0 }),
            ElementwiseOp::Neg => ta.map(|v| -v),
            _ => unreachable!(),
        };
        check_finite(op, &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, a)
    }

    /// `a * factor` for a fixed scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        check_finite("scale", &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        check_finite("add_scalar", &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        check_finite("clamp", &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Clamp(a, lo, hi), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = matmul_raw(ta, false, tb, false);
        check_finite("matmul", &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        check_finite("sum", &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::EmptyBatch { op: "mean" });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axis`; the axis is kept with size 1 when `keepdim`.
    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "mean_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let n = shape[axis];
        if n == 0 {
            return Err(Error::EmptyBatch { op: "mean_axis" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let src = ta.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += *s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::MeanAxis { input: a, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let value = ta.reshape(shape).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            lhs: ta.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Multiplies by a fixed same-shape mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Mask(a, mask), rg))
    }

    /// Batch-mean softmax cross-entropy of `m×C` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (m, c) = (tl.rows(), tl.cols());
        if m == 0 {
            return Err(Error::EmptyBatch { op: "cross_entropy" });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = tl.row(i);
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            // the arg-max term contributes exactly 1 to the partition sum
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let log_z = rest.ln_1p();
            loss += (max - row[labels[i]]) + log_z;
            for j in 0..c {
                probs[i * c + j] = (row[j] - max - log_z).exp();
            }
        }
        let value = Tensor::scalar(loss / m as f64);
        check_finite("cross_entropy", &value)?;
        let probs = Tensor::new(vec![m, c], probs)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`, adding into every reachable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss is not connected to any differentiable leaf"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                accumulate(&mut self.nodes[idx].grad, g);
                continue;
            }
            let contributions = self.backward_rule(&node.op, &node.value, &g)?;
            for (var, contrib) in contributions {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut grads[var.0], contrib);
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        Ok(match op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let shape = out.shape();
                let sa = broadcast_strides(ta.shape(), shape);
                let sb = broadcast_strides(tb.shape(), shape);
                let (da, db) = (ta.data(), tb.data());
                let n = out.numel();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                let gd = g.data();
                for_each_broadcast(shape, &sa, &sb, |o, i, j| {
                    let (x, y, gy) = (da[i], db[j], gd[o]);
                    let (dx, dy) = match kind {
                        ElementwiseOp::Add => (gy, gy),
                        ElementwiseOp::Sub => (gy, -gy),
                        ElementwiseOp::Mul => (gy * y, gy * x),
                        ElementwiseOp::Div => (gy / y, -gy * x / (y * y)),
                        _ => unreachable!(),
                    };
                    ga[o] = dx;
                    gb[o] = dy;
                });
                let ga = Tensor::new(shape.to_vec(), ga)?;
                let gb = Tensor::new(shape.to_vec(), gb)?;
                vec![
                    (*a, sum_to_shape(&ga, ta.shape())),
                    (*b, sum_to_shape(&gb, tb.shape())),
                ]
            }
            Op::Unary(kind, a) => {
                let ta = val(*a);
                let ga = match kind {
                    ElementwiseOp::Sqrt => {
                        let d = out.data().iter().zip(g.data()).map(|(&y, &gy)| gy * 0.5 / y);
                        Tensor::new(out.shape().to_vec(), d.collect())?
                    }
                    ElementwiseOp::Exp => {
                        let d = out.data().iter().zip(g.data()).map(|(&y, &gy)| gy * y);
                        Tensor::new(out.shape().to_vec(), d.collect())?
                    }
                    ElementwiseOp::Log => zip(ta, &|x, gy| gy / x),
                    ElementwiseOp::Relu => zip(ta, &|x, gy| if x > 0.0 { gy } else { 0.0 }),
                    ElementwiseOp::Neg => g.map(|gy| -gy),
                    _ => unreachable!(),
                };
                vec![(*a, ga)]
            }
            Op::Scale(a, factor) => vec![(*a, g.map(|gy| gy * factor))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Clamp(a, lo, hi) => {
                let ga = zip(val(*a), &|x, gy| if x < *lo || x > *hi { 0.0 } else { gy });
                vec![(*a, ga)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                vec![
                    (*a, matmul_raw(g, false, tb, true)),
                    (*b, matmul_raw(ta, true, g, false)),
                ]
            }
            Op::Sum(a) => {
                let gy = g.data()[0];
                vec![(*a, Tensor::full(val(*a).shape(), gy))]
            }
            Op::MeanAxis { input, axis } => {
                let shape = val(*input).shape();
                let n = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let inv = 1.0 / n as f64;
                let gd = g.data();
                let mut data = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            data[base + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                vec![(*input, Tensor::new(shape.to_vec(), data)?)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Mask(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(gy, m)| gy * m).collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), d)?)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gy = g.data()[0];
                let (m, c) = (probs.rows(), probs.cols());
                let scale = gy / m as f64;
                let mut data = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    data[i * c + y] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(vec![m, c], data)?)]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Matrix product with optional transposition of either operand.
pub(crate) fn matmul_raw(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * bc + p];
                }
            } else {
                for (o, &bv) in row.iter_mut().zip(&bd[p * bc..(p + 1) * bc]) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// Column means and biased (divisor `m`) variances of an `m×d` batch.
pub fn reduce_stats(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let tx = tape.value(x);
    if tx.rank() != 2 {
        return Err(Error::invalid(format!(
            "reduce_stats expects a rank-2 batch, got {:?}",
            tx.shape()
        )));
    }
    if tx.rows() == 0 {
        return Err(Error::EmptyBatch { op: "reduce_stats" });
    }
    let mean = tape.mean_axis(x, 0, false)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_axis(sq, 0, false)?;
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0, 3.0]);
        let b = vec_leaf(&mut t, &[2.0, 2.0, 2.0]);
        let c = t.elementwise(ElementwiseOp::Mul, a, Some(b)).unwrap();
        assert_eq!(t.value(c).data(), &[2.0, 4.0, 6.0]);
        let r = vec_leaf(&mut t, &[-1.0, 0.0, 2.0]);
        let y = t.elementwise(ElementwiseOp::Relu, r, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn elementwise_arity_is_checked() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0]);
        assert!(t.elementwise(ElementwiseOp::Add, a, None).is_err());
        assert!(t.elementwise(ElementwiseOp::Exp, a, Some(a)).is_err());
    }

    #[test]
    fn log_gradient_at_half() {
        // central difference of ln at 0.5 with h = 1e-6 gives 2.0 to ~1e-10
        let fd = ((0.5f64 + 1e-6).ln() - (0.5f64 - 1e-6).ln()) / 2e-6;
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[0.5]);
        let y = t.log(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap().data()[0];
        assert!((g - 2.0).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-8);
    }

    #[test]
    fn domain_errors_name_the_op() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-1.0]);
        let e = t.sqrt(x).unwrap_err();
        assert!(e.to_string().starts_with("sqrt"), "{e}");
        let e = t.log(x).unwrap_err();
        assert!(e.to_string().starts_with("log"), "{e}");
        let z = t.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(t.div(x, z), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { op: "add", .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = t.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).shape(), &[1, 1]);
        assert_eq!(t.value(p).data(), &[11.0]);
    }

    #[test]
    fn reduce_stats_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap());
        let (m, v) = reduce_stats(&mut t, x).unwrap();
        assert_eq!(t.value(m).data(), &[2.0]);
        assert!((t.value(v).data()[0] - 2.0 / 3.0).abs() < 1e-15);

        let x = t.leaf(Tensor::from_rows(&[[4.25], [4.25]]).unwrap());
        let (m, v) = reduce_stats(&mut t, x).unwrap();
        assert_eq!(t.value(m).data(), &[4.25]);
        assert_eq!(t.value(v).data(), &[0.0]);

        let x = t.leaf(Tensor::from_rows(&[[5.0, 7.0]]).unwrap());
        let (m, v) = reduce_stats(&mut t, x).unwrap();
        assert_eq!(t.value(m).data(), &[5.0, 7.0]);
        assert_eq!(t.value(v).data(), &[0.0, 0.0]);

        let x = t.leaf(Tensor::new(vec![0, 2], vec![]).unwrap());
        assert!(matches!(
            reduce_stats(&mut t, x),
            Err(Error::EmptyBatch { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
        // a second call accumulates
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
        t.zero_grads();
        assert!(t.grad(x).is_none());

        // constant loss: zero derivative everywhere
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        let z = t.scale(x, 0.0).unwrap();
        let c = t.sum(z).unwrap();
        let loss = t.add_scalar(c, 3.0).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        assert!(t.backward(x).is_err());
        let c = t.constant(Tensor::scalar(1.0));
        assert!(t.backward(c).is_err());
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[3.0]);
        let d = t.detach(x);
        let y = t.mul(x, d).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_extreme() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let ce = t.cross_entropy(l, &[1]).unwrap();
        assert!((t.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let l = t.constant(Tensor::from_rows(&[[10.0, -10.0]]).unwrap());
        let ce = t.cross_entropy(l, &[0]).unwrap();
        let v = t.value(ce).data()[0];
        assert!((v - 2.061_153_620_314_381e-9).abs() < 1e-22, "{v}");
        assert!(t.cross_entropy(l, &[2]).is_err());
    }
}
