//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits each node after all of its consumers. Leaves may borrow their
//! values (network weights, constants) so a forward pass never copies or
//! mutates parameters.

use std::borrow::Cow;

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a[n,m] + sign * v[m]` broadcast over rows.
    AddRow(Var, Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    LogSumExp(Var),
    LogSoftmaxRows(Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one output with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed leaf; `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_owned(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn add_row_signed(&mut self, a: Var, v: Var, sign: f64) -> Result<Var> {
        let av = self.value(a);
        let vv = self.value(v);
        let (_, m) = av.as_matrix_dims();
        if vv.len() != m {
            return Err(Error::shape("add_row", m, vv.len()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(vv.data()) {
                *o += sign * b;
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::AddRow(a, v, sign), rg))
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` value.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.add_row_signed(a, v, 1.0)
    }

    /// Subtracts a length-`m` vector from every row of an `[n, m]` value.
    pub fn sub_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.add_row_signed(a, v, -1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of an `[n, m]` value, giving `[n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = v.as_matrix_dims();
        let data: Vec<f64> = (0..n).map(|i| v.data()[i * m..(i + 1) * m].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::SumRows(a), rg)
    }

    /// Concatenates `[n, c_i]` values along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).as_matrix_dims().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix_dims();
            if r != n {
                return Err(Error::shape("concat_cols", format!("{n} rows"), r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of an `[n, m]` value.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.as_matrix_dims();
        if start > end || end > m {
            return Err(Error::shape("slice_cols", format!("range within 0..{m}"), format!("{start}..{end}")));
        }
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&v.data()[i * m + start..i * m + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, end - start], data)?, Op::SliceCols(a, start, end), rg))
    }

    /// Stable log-sum-exp over all entries.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let s = super::logsumexp(self.value(a).data())?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(a), rg))
    }

    /// Row-wise log-softmax of an `[n, m]` value.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (_, m) = v.as_matrix_dims();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(m) {
            let lse = super::logsumexp(row).unwrap_or(f64::NAN);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Convenience for a scalar output: seeds with one.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("variable {} not on tape", output.0)));
        }
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        self.backward(output, &seed)
    }

    /// Propagates `seed` (shaped like `output`) back to every node that
    /// requires a gradient.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("variable {} not on tape", output.0)));
        }
        let out_val = self.value(output);
        if out_val.shape() != seed.shape() {
            return Err(Error::shape("backward seed", format!("{:?}", out_val.shape()), format!("{:?}", seed.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(buf);
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = av.as_matrix_dims();
                let (_, m) = bv.as_matrix_dims();
                self.accumulate(grads, *a, |ga| matmul_bt_into(g.data(), bv.data(), ga.data_mut(), n, k, m));
                self.accumulate(grads, *b, |gb| matmul_at_into(av.data(), g.data(), gb.data_mut(), n, k, m));
            }
            Op::AddRow(a, v, sign) => {
                self.accumulate(grads, *a, |ga| ga.axpy(1.0, g).expect("shape checked in forward"));
                let m = self.value(*v).len();
                self.accumulate(grads, *v, |gv| {
                    for row in g.data().chunks(m) {
                        for (o, &x) in gv.data_mut().iter_mut().zip(row) {
                            *o += sign * x;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.axpy(1.0, g).expect("shape checked in forward"));
                self.accumulate(grads, *b, |gb| gb.axpy(1.0, g).expect("shape checked in forward"));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| ga.axpy(1.0, g).expect("shape checked in forward"));
                self.accumulate(grads, *b, |gb| gb.axpy(-1.0, g).expect("shape checked in forward"));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| ga.axpy(*c, g).expect("shape checked in forward"));
            }
            Op::Tanh(a) => self.elementwise_back(grads, *a, g, y, |_, y| 1.0 - y * y),
            Op::Exp(a) => self.elementwise_back(grads, *a, g, y, |_, y| y),
            Op::Log(a) => self.elementwise_back(grads, *a, g, y, |x, _| 1.0 / x),
            Op::Sqrt(a) => self.elementwise_back(grads, *a, g, y, |_, y| if y == 0.0 { 0.0 } else { 0.5 / y }),
            Op::Square(a) => self.elementwise_back(grads, *a, g, y, |x, _| 2.0 * x),
            Op::Sum(a) => {
                let gs = g.item();
                self.accumulate(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|o| *o += gs));
            }
            Op::SumRows(a) => {
                let (_, m) = self.value(*a).as_matrix_dims();
                self.accumulate(grads, *a, |ga| {
                    for (row, &gi) in ga.data_mut().chunks_mut(m).zip(g.data()) {
                        row.iter_mut().for_each(|o| *o += gi);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (n, total) = y.as_matrix_dims();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).as_matrix_dims();
                    self.accumulate(grads, p, |gp| {
                        for i in 0..n {
                            let src = &g.data()[i * total + offset..i * total + offset + w];
                            for (o, &x) in gp.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (n, m) = self.value(*a).as_matrix_dims();
                let w = end - start;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..n {
                        let src = &g.data()[i * w..(i + 1) * w];
                        for (o, &x) in ga.data_mut()[i * m + start..i * m + end].iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let xv = self.value(*a);
                let lse = y.item();
                let gs = g.item();
                self.accumulate(grads, *a, |ga| {
                    for (o, &x) in ga.data_mut().iter_mut().zip(xv.data()) {
                        *o += gs * (x - lse).exp();
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (_, m) = y.as_matrix_dims();
                self.accumulate(grads, *a, |ga| {
                    for ((orow, yrow), grow) in ga.data_mut().chunks_mut(m).zip(y.data().chunks(m)).zip(g.data().chunks(m)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((o, &yi), &gi) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                });
            }
        }
        Ok(())
    }

    fn elementwise_back(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        g: &Tensor,
        y: &Tensor,
        dydx: impl Fn(f64, f64) -> f64,
    ) {
        let xv = self.value(a);
        self.accumulate(grads, a, |ga| {
            for (((o, &gi), &xi), &yi) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()).zip(y.data()) {
                *o += gi * dydx(xi, yi);
            }
        });
    }

    /// Checks two values share a shape; used by callers composing ops.
    pub fn check_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        same_shape(op, self.value(a), self.value(b))
    }
}
