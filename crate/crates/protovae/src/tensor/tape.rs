//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation records its inputs and parameters; node values are the
//! saved activations. `backward` runs one reverse sweep and is consumable
//! once per tape. A tape is single-owner: batch parallelism uses one tape
//! per task.

use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Debug)]
enum Op<F: Element> {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    AvgPool2d {
        x: ValueId,
        kernel: usize,
        stride: usize,
    },
    LeakyRelu {
        x: ValueId,
        slope: F,
    },
    Relu {
        x: ValueId,
    },
    Tanh {
        x: ValueId,
    },
    Exp {
        x: ValueId,
    },
    Ln {
        x: ValueId,
    },
    Square {
        x: ValueId,
    },
    ClampMin {
        x: ValueId,
        c: F,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Div {
        a: ValueId,
        b: ValueId,
    },
    AddScalar {
        x: ValueId,
        c: F,
    },
    MulScalar {
        x: ValueId,
        c: F,
    },
    /// a (R,C) × b (S,C)ᵀ → (R,S)
    MatMulNT {
        a: ValueId,
        b: ValueId,
    },
    Sum {
        x: ValueId,
    },
    SumAxis {
        x: ValueId,
        axis: usize,
    },
    /// x (R,C) + v (C,) broadcast over rows
    AddRowVec {
        x: ValueId,
        v: ValueId,
    },
    /// x (R,C) + v (R,) broadcast over columns
    AddColVec {
        x: ValueId,
        v: ValueId,
    },
    /// x (R,C) with row i scaled by v(i)
    MulColVec {
        x: ValueId,
        v: ValueId,
    },
    Reshape {
        x: ValueId,
        shape: Vec<usize>,
    },
    SliceRows {
        x: ValueId,
        start: usize,
        len: usize,
    },
    /// out[i][j] = x[i][starts[i] + j], j < len
    RowBlocks {
        x: ValueId,
        starts: Vec<usize>,
        len: usize,
    },
    /// out[i][p] = ‖z(i) − phi(p)‖² with z (N,d), phi (P,d)
    PairwiseSqDist {
        z: ValueId,
        phi: ValueId,
    },
    Softmax {
        x: ValueId,
    },
}

impl<F: Element> Op<F> {
    fn inputs(&self) -> Vec<ValueId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::AvgPool2d { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Relu { x }
            | Op::Tanh { x }
            | Op::Exp { x }
            | Op::Ln { x }
            | Op::Square { x }
            | Op::ClampMin { x, .. }
            | Op::AddScalar { x, .. }
            | Op::MulScalar { x, .. }
            | Op::Sum { x }
            | Op::SumAxis { x, .. }
            | Op::Reshape { x, .. }
            | Op::SliceRows { x, .. }
            | Op::RowBlocks { x, .. }
            | Op::Softmax { x } => vec![*x],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
                vec![*a, *b]
            }
            Op::MatMulNT { a, b } => vec![*a, *b],
            Op::PairwiseSqDist { z, phi } => vec![*z, *phi],
            Op::AddRowVec { x, v } | Op::AddColVec { x, v } | Op::MulColVec { x, v } => {
                vec![*x, *v]
            }
        }
    }
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a tracked tensor; zeros if the value never influenced the
    /// backward root.
    pub fn take(&mut self, id: ValueId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }
}

pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records an input tensor. Only `tracked` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, tracked: bool) -> ValueId {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn record(&mut self, op: Op<F>) -> Result<ValueId> {
        let value = self.eval_op(&op)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Recomputes a node's value from its recorded inputs, bypassing the
    /// saved activation. Used to verify replay fidelity.
    pub fn recompute(&self, id: ValueId) -> Result<Tensor<F>> {
        match &self.nodes[id.0].op {
            Op::Leaf => Ok(self.nodes[id.0].value.clone()),
            op => self.eval_op(op),
        }
    }

    fn eval_op(&self, op: &Op<F>) -> Result<Tensor<F>> {
        let v = |id: &ValueId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => kernels::conv2d(v(x), v(w), b.as_ref().map(v), *stride, *padding),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
                output_padding,
            } => kernels::conv_transpose2d(
                v(x),
                v(w),
                b.as_ref().map(v),
                *stride,
                *padding,
                *output_padding,
            ),
            Op::AvgPool2d { x, kernel, stride } => kernels::avg_pool2d(v(x), *kernel, *stride),
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                Ok(v(x).map(|a| if a >= F::ZERO { a } else { a * s }))
            }
            Op::Relu { x } => Ok(v(x).map(|a| a.max(F::ZERO))),
            Op::Tanh { x } => Ok(v(x).map(|a| a.tanh())),
            Op::Exp { x } => Ok(v(x).map(|a| a.exp())),
            Op::Ln { x } => {
                let t = v(x);
                if let Some(bad) = t.data().iter().find(|a| **a <= F::ZERO) {
                    return Err(Error::Domain {
                        op: "ln",
                        message: format!("log of non-positive value {bad}"),
                    });
                }
                Ok(t.map(|a| a.ln()))
            }
            Op::Square { x } => Ok(v(x).map(|a| a * a)),
            Op::ClampMin { x, c } => {
                let c = *c;
                Ok(v(x).map(|a| a.max(c)))
            }
            Op::Add { a, b } => zip_broadcast("add", v(a), v(b), |x, y| x + y),
            Op::Sub { a, b } => zip_broadcast("sub", v(a), v(b), |x, y| x - y),
            Op::Mul { a, b } => zip_broadcast("mul", v(a), v(b), |x, y| x * y),
            Op::Div { a, b } => zip_broadcast("div", v(a), v(b), |x, y| x / y),
            Op::AddScalar { x, c } => {
                let c = *c;
                Ok(v(x).map(|a| a + c))
            }
            Op::MulScalar { x, c } => {
                let c = *c;
                Ok(v(x).map(|a| a * c))
            }
            Op::MatMulNT { a, b } => {
                let (ta, tb) = (v(a), v(b));
                let (r, ca) = (ta.shape()[0], ta.shape()[1]);
                let (s, cb) = (tb.shape()[0], tb.shape()[1]);
                if ca != cb {
                    return Err(Error::ShapeMismatch {
                        op: "matmul_nt",
                        dim: 1,
                        expected: ca,
                        got: cb,
                    });
                }
                let mut out = vec![F::ZERO; r * s];
                kernels::gemm_nt(ta.data(), tb.data(), r, s, ca, &mut out);
                Tensor::new(vec![r, s], out)
            }
            Op::Sum { x } => Ok(Tensor::scalar(v(x).sum())),
            Op::SumAxis { x, axis } => {
                let t = v(x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                if *axis == 0 {
                    let mut out = vec![F::ZERO; c];
                    for row in t.data().chunks_exact(c) {
                        for (o, &x) in out.iter_mut().zip(row.iter()) {
                            *o += x;
                        }
                    }
                    Tensor::new(vec![c], out)
                } else {
                    let mut out = vec![F::ZERO; r];
                    for (o, row) in out.iter_mut().zip(t.data().chunks_exact(c)) {
                        *o = row.iter().copied().sum();
                    }
                    Tensor::new(vec![r], out)
                }
            }
            Op::AddRowVec { x, v: vecid } => {
                let (t, w) = (v(x), v(vecid));
                let c = t.shape()[1];
                let mut out = t.clone();
                for row in out.data_mut().chunks_exact_mut(c) {
                    for (o, &b) in row.iter_mut().zip(w.data().iter()) {
                        *o += b;
                    }
                }
                Ok(out)
            }
            Op::AddColVec { x, v: vecid } => {
                let (t, w) = (v(x), v(vecid));
                let c = t.shape()[1];
                let mut out = t.clone();
                for (row, &b) in out.data_mut().chunks_exact_mut(c).zip(w.data().iter()) {
                    for o in row.iter_mut() {
                        *o += b;
                    }
                }
                Ok(out)
            }
            Op::MulColVec { x, v: vecid } => {
                let (t, w) = (v(x), v(vecid));
                let c = t.shape()[1];
                let mut out = t.clone();
                for (row, &b) in out.data_mut().chunks_exact_mut(c).zip(w.data().iter()) {
                    for o in row.iter_mut() {
                        *o *= b;
                    }
                }
                Ok(out)
            }
            Op::Reshape { x, shape } => v(x).reshaped(shape.clone()),
            Op::SliceRows { x, start, len } => {
                let t = v(x);
                let c = t.shape()[1];
                let data = t.data()[start * c..(start + len) * c].to_vec();
                Tensor::new(vec![*len, c], data)
            }
            Op::RowBlocks { x, starts, len } => {
                let t = v(x);
                let c = t.shape()[1];
                let mut out = Vec::with_capacity(starts.len() * len);
                for (row, &s) in t.data().chunks_exact(c).zip(starts.iter()) {
                    out.extend_from_slice(&row[s..s + len]);
                }
                Tensor::new(vec![starts.len(), *len], out)
            }
            Op::PairwiseSqDist { z, phi } => {
                let (tz, tp) = (v(z), v(phi));
                let d = tz.shape()[1];
                if tp.shape()[1] != d {
                    return Err(Error::ShapeMismatch {
                        op: "pairwise_sq_dist",
                        dim: 1,
                        expected: d,
                        got: tp.shape()[1],
                    });
                }
                let (n, p) = (tz.shape()[0], tp.shape()[0]);
                let mut out = Vec::with_capacity(n * p);
                for zrow in tz.data().chunks_exact(d) {
                    for prow in tp.data().chunks_exact(d) {
                        let mut acc = F::ZERO;
                        for (&a, &b) in zrow.iter().zip(prow.iter()) {
                            let diff = a - b;
                            acc += diff * diff;
                        }
                        out.push(acc);
                    }
                }
                Tensor::new(vec![n, p], out)
            }
            Op::Softmax { x } => Ok(kernels::softmax_rows(v(x))),
        }
    }

    // ── op builders ─────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        self.record(Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        })
    }

    pub fn conv_transpose2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<ValueId> {
        self.record(Op::ConvTranspose2d {
            x,
            w,
            b,
            stride,
            padding,
            output_padding,
        })
    }

    /// Affine map: x (N,I) × w (O,I)ᵀ + b.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let y = self.record(Op::MatMulNT { a: x, b: w })?;
        match b {
            Some(b) => self.record(Op::AddRowVec { x: y, v: b }),
            None => Ok(y),
        }
    }

    pub fn avg_pool2d(&mut self, x: ValueId, kernel: usize, stride: usize) -> Result<ValueId> {
        self.record(Op::AvgPool2d { x, kernel, stride })
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: F) -> Result<ValueId> {
        self.record(Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Relu { x })
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Tanh { x })
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Exp { x })
    }

    pub fn ln(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Ln { x })
    }

    pub fn square(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Square { x })
    }

    pub fn clamp_min(&mut self, x: ValueId, c: F) -> Result<ValueId> {
        self.record(Op::ClampMin { x, c })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::Mul { a, b })
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::Div { a, b })
    }

    pub fn add_scalar(&mut self, x: ValueId, c: F) -> Result<ValueId> {
        self.record(Op::AddScalar { x, c })
    }

    pub fn mul_scalar(&mut self, x: ValueId, c: F) -> Result<ValueId> {
        self.record(Op::MulScalar { x, c })
    }

    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::MatMulNT { a, b })
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Sum { x })
    }

    pub fn sum_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        if axis > 1 || self.value(x).shape().len() != 2 {
            return Err(Error::InvalidArgument {
                op: "sum_axis",
                message: format!(
                    "axis {axis} invalid for shape {:?}",
                    self.value(x).shape()
                ),
            });
        }
        self.record(Op::SumAxis { x, axis })
    }

    pub fn add_row_vec(&mut self, x: ValueId, v: ValueId) -> Result<ValueId> {
        self.check_vec_broadcast("add_row_vec", x, v, 1)?;
        self.record(Op::AddRowVec { x, v })
    }

    pub fn add_col_vec(&mut self, x: ValueId, v: ValueId) -> Result<ValueId> {
        self.check_vec_broadcast("add_col_vec", x, v, 0)?;
        self.record(Op::AddColVec { x, v })
    }

    pub fn mul_col_vec(&mut self, x: ValueId, v: ValueId) -> Result<ValueId> {
        self.check_vec_broadcast("mul_col_vec", x, v, 0)?;
        self.record(Op::MulColVec { x, v })
    }

    fn check_vec_broadcast(
        &self,
        op: &'static str,
        x: ValueId,
        v: ValueId,
        dim: usize,
    ) -> Result<()> {
        let xs = self.value(x).shape();
        if xs.len() != 2 {
            return Err(Error::InvalidArgument {
                op,
                message: format!("expected rank-2 tensor, got {xs:?}"),
            });
        }
        let expected = xs[dim];
        let got = self.value(v).numel();
        if got != expected {
            return Err(Error::ShapeMismatch {
                op,
                dim,
                expected,
                got,
            });
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        self.record(Op::Reshape { x, shape })
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let rows = self.value(x).shape()[0];
        if start + len > rows {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                message: format!("rows {start}..{} out of bounds for {rows}", start + len),
            });
        }
        self.record(Op::SliceRows { x, start, len })
    }

    pub fn row_blocks(&mut self, x: ValueId, starts: Vec<usize>, len: usize) -> Result<ValueId> {
        let shape = self.value(x).shape();
        if starts.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "row_blocks",
                dim: 0,
                expected: shape[0],
                got: starts.len(),
            });
        }
        if let Some(&bad) = starts.iter().find(|&&s| s + len > shape[1]) {
            return Err(Error::InvalidArgument {
                op: "row_blocks",
                message: format!("block {bad}..{} out of bounds for {} columns", bad + len, shape[1]),
            });
        }
        self.record(Op::RowBlocks { x, starts, len })
    }

    pub fn pairwise_sq_dist(&mut self, z: ValueId, phi: ValueId) -> Result<ValueId> {
        self.record(Op::PairwiseSqDist { z, phi })
    }

    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Softmax { x })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Populates a gradient for every
    /// tensor with `requires_grad`; consumable once per tape.
    pub fn backward(&mut self, root: ValueId) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let numel = self.value(root).numel();
        if numel != 1 {
            return Err(Error::NonScalarBackward { numel });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::ONE));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.step_backward(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        // Anything tracked but disconnected from the root gets zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn step_backward(&self, i: usize, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let v = |id: ValueId| &self.nodes[id.0].value;
        let add_to = |id: ValueId, delta: Tensor<F>, grads: &mut [Option<Tensor<F>>]| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (gx, gw, gb) = kernels::conv2d_grads(v(*x), v(*w), gout, *stride, *padding);
                add_to(*x, gx, grads);
                add_to(*w, gw, grads);
                if let Some(b) = b {
                    add_to(*b, gb, grads);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
                ..
            } => {
                let (gx, gw, gb) =
                    kernels::conv_transpose2d_grads(v(*x), v(*w), gout, *stride, *padding);
                add_to(*x, gx, grads);
                add_to(*w, gw, grads);
                if let Some(b) = b {
                    add_to(*b, gb, grads);
                }
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let gx = kernels::avg_pool2d_grad(v(*x).shape(), *kernel, *stride, gout);
                add_to(*x, gx, grads);
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                let gx = zip_grad(v(*x), gout, |a, g| if a >= F::ZERO { g } else { g * s });
                add_to(*x, gx, grads);
            }
            Op::Relu { x } => {
                let gx = zip_grad(v(*x), gout, |a, g| if a > F::ZERO { g } else { F::ZERO });
                add_to(*x, gx, grads);
            }
            Op::Tanh { x } => {
                let y = &self.nodes[i].value;
                let gx = zip_grad(y, gout, |t, g| g * (F::ONE - t * t));
                add_to(*x, gx, grads);
            }
            Op::Exp { x } => {
                let y = &self.nodes[i].value;
                let gx = zip_grad(y, gout, |e, g| g * e);
                add_to(*x, gx, grads);
            }
            Op::Ln { x } => {
                let gx = zip_grad(v(*x), gout, |a, g| g / a);
                add_to(*x, gx, grads);
            }
            Op::Square { x } => {
                let two = F::from_f64(2.0);
                let gx = zip_grad(v(*x), gout, |a, g| g * a * two);
                add_to(*x, gx, grads);
            }
            Op::ClampMin { x, c } => {
                let c = *c;
                let gx = zip_grad(v(*x), gout, |a, g| if a >= c { g } else { F::ZERO });
                add_to(*x, gx, grads);
            }
            Op::Add { a, b } => {
                add_to(*a, shrink_to(v(*a), gout.clone()), grads);
                add_to(*b, shrink_to(v(*b), gout.clone()), grads);
            }
            Op::Sub { a, b } => {
                add_to(*a, shrink_to(v(*a), gout.clone()), grads);
                add_to(*b, shrink_to(v(*b), gout.map(|g| -g)), grads);
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (v(*a), v(*b));
                add_to(*a, shrink_to(ta, broadcast_apply(gout, tb, |g, bv| g * bv)), grads);
                add_to(*b, shrink_to(tb, broadcast_apply(gout, ta, |g, av| g * av)), grads);
            }
            Op::Div { a, b } => {
                let (ta, tb) = (v(*a), v(*b));
                add_to(*a, shrink_to(ta, broadcast_apply(gout, tb, |g, bv| g / bv)), grads);
                let num = broadcast_apply(gout, ta, |g, av| -g * av);
                let gb_full = broadcast_apply(&num, tb, |x, bv| x / (bv * bv));
                add_to(*b, shrink_to(tb, gb_full), grads);
            }
            Op::AddScalar { x, .. } => add_to(*x, gout.clone(), grads),
            Op::MulScalar { x, c } => {
                let c = *c;
                add_to(*x, gout.map(|g| g * c), grads);
            }
            Op::MatMulNT { a, b } => {
                let (ta, tb) = (v(*a), v(*b));
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let s = tb.shape()[0];
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(ta.shape().to_vec());
                    kernels::gemm_nn(gout.data(), tb.data(), r, s, c, ga.data_mut());
                    add_to(*a, ga, grads);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(tb.shape().to_vec());
                    kernels::gemm_tn(gout.data(), ta.data(), r, s, c, gb.data_mut());
                    add_to(*b, gb, grads);
                }
            }
            Op::Sum { x } => {
                let g = gout.item();
                add_to(*x, Tensor::full(v(*x).shape().to_vec(), g), grads);
            }
            Op::SumAxis { x, axis } => {
                let t = v(*x);
                let c = t.shape()[1];
                let mut gx = Tensor::zeros(t.shape().to_vec());
                if *axis == 0 {
                    for row in gx.data_mut().chunks_exact_mut(c) {
                        for (o, &g) in row.iter_mut().zip(gout.data().iter()) {
                            *o = g;
                        }
                    }
                } else {
                    for (row, &g) in gx.data_mut().chunks_exact_mut(c).zip(gout.data().iter()) {
                        for o in row.iter_mut() {
                            *o = g;
                        }
                    }
                }
                add_to(*x, gx, grads);
            }
            Op::AddRowVec { x, v: vecid } => {
                add_to(*x, gout.clone(), grads);
                if self.nodes[vecid.0].requires_grad {
                    let c = gout.shape()[1];
                    let mut gv = Tensor::zeros(vec![c]);
                    for row in gout.data().chunks_exact(c) {
                        for (o, &g) in gv.data_mut().iter_mut().zip(row.iter()) {
                            *o += g;
                        }
                    }
                    add_to(*vecid, gv, grads);
                }
            }
            Op::AddColVec { x, v: vecid } => {
                add_to(*x, gout.clone(), grads);
                if self.nodes[vecid.0].requires_grad {
                    let c = gout.shape()[1];
                    let r = gout.shape()[0];
                    let mut gv = Tensor::zeros(vec![r]);
                    for (o, row) in gv.data_mut().iter_mut().zip(gout.data().chunks_exact(c)) {
                        *o = row.iter().copied().sum();
                    }
                    add_to(*vecid, gv, grads);
                }
            }
            Op::MulColVec { x, v: vecid } => {
                let (t, w) = (v(*x), v(*vecid));
                let c = t.shape()[1];
                if self.nodes[x.0].requires_grad {
                    let mut gx = gout.clone();
                    for (row, &b) in gx.data_mut().chunks_exact_mut(c).zip(w.data().iter()) {
                        for o in row.iter_mut() {
                            *o *= b;
                        }
                    }
                    add_to(*x, gx, grads);
                }
                if self.nodes[vecid.0].requires_grad {
                    let mut gv = Tensor::zeros(vec![t.shape()[0]]);
                    for ((o, grow), xrow) in gv
                        .data_mut()
                        .iter_mut()
                        .zip(gout.data().chunks_exact(c))
                        .zip(t.data().chunks_exact(c))
                    {
                        let mut acc = F::ZERO;
                        for (&g, &a) in grow.iter().zip(xrow.iter()) {
                            acc += g * a;
                        }
                        *o = acc;
                    }
                    add_to(*vecid, gv, grads);
                }
            }
            Op::Reshape { x, .. } => {
                let gx = gout
                    .reshaped(v(*x).shape().to_vec())
                    .expect("reshape grad shape");
                add_to(*x, gx, grads);
            }
            Op::SliceRows { x, start, len } => {
                let t = v(*x);
                let c = t.shape()[1];
                let mut gx = Tensor::zeros(t.shape().to_vec());
                gx.data_mut()[start * c..(start + len) * c].copy_from_slice(gout.data());
                add_to(*x, gx, grads);
            }
            Op::RowBlocks { x, starts, len } => {
                let t = v(*x);
                let c = t.shape()[1];
                let mut gx = Tensor::zeros(t.shape().to_vec());
                for ((row, &s), grow) in gx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(starts.iter())
                    .zip(gout.data().chunks_exact(*len))
                {
                    for (o, &g) in row[s..s + len].iter_mut().zip(grow.iter()) {
                        *o += g;
                    }
                }
                add_to(*x, gx, grads);
            }
            Op::PairwiseSqDist { z, phi } => {
                let (tz, tp) = (v(*z), v(*phi));
                let d = tz.shape()[1];
                let p = tp.shape()[0];
                let two = F::from_f64(2.0);
                let want_z = self.nodes[z.0].requires_grad;
                let want_phi = self.nodes[phi.0].requires_grad;
                let mut gz = Tensor::zeros(tz.shape().to_vec());
                let mut gp = Tensor::zeros(tp.shape().to_vec());
                for (i_row, zrow) in tz.data().chunks_exact(d).enumerate() {
                    let grow = &gout.data()[i_row * p..(i_row + 1) * p];
                    let gzrow = &mut gz.data_mut()[i_row * d..(i_row + 1) * d];
                    for (p_row, prow) in tp.data().chunks_exact(d).enumerate() {
                        let g = grow[p_row] * two;
                        if g == F::ZERO {
                            continue;
                        }
                        let gprow = &mut gp.data_mut()[p_row * d..(p_row + 1) * d];
                        for (((gzv, gpv), &a), &b) in gzrow
                            .iter_mut()
                            .zip(gprow.iter_mut())
                            .zip(zrow.iter())
                            .zip(prow.iter())
                        {
                            let diff = g * (a - b);
                            *gzv += diff;
                            *gpv -= diff;
                        }
                    }
                }
                if want_z {
                    add_to(*z, gz, grads);
                }
                if want_phi {
                    add_to(*phi, gp, grads);
                }
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let c = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(y.shape().to_vec());
                for ((grow, yrow), orow) in gout
                    .data()
                    .chunks_exact(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(gx.data_mut().chunks_exact_mut(c))
                {
                    let mut dot = F::ZERO;
                    for (&g, &p) in grow.iter().zip(yrow.iter()) {
                        dot += g * p;
                    }
                    for ((o, &g), &p) in orow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *o = p * (g - dot);
                    }
                }
                add_to(*x, gx, grads);
            }
        }
    }
}

/// Elementwise combine supporting equal shapes and scalar-vs-tensor
/// broadcasting (the only broadcasts in the closed op set).
fn zip_broadcast<F: Element>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if a.numel() == 1 {
        let x = a.item();
        return Ok(b.map(|y| f(x, y)));
    }
    if b.numel() == 1 {
        let y = b.item();
        return Ok(a.map(|x| f(x, y)));
    }
    let dim = a
        .shape()
        .iter()
        .zip(b.shape().iter())
        .position(|(x, y)| x != y)
        .unwrap_or(0);
    Err(Error::ShapeMismatch {
        op,
        dim,
        expected: a.shape().get(dim).copied().unwrap_or(0),
        got: b.shape().get(dim).copied().unwrap_or(0),
    })
}

/// g combined with an operand that may be scalar-broadcast against it.
fn broadcast_apply<F: Element>(g: &Tensor<F>, operand: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    if operand.numel() == 1 {
        let y = operand.item();
        g.map(|x| f(x, y))
    } else {
        zip_grad(g, operand, |x, y| f(x, y))
    }
}

/// Reduces a gradient to a scalar when the target operand was broadcast.
fn shrink_to<F: Element>(target: &Tensor<F>, grad: Tensor<F>) -> Tensor<F> {
    if target.numel() == 1 && grad.numel() != 1 {
        Tensor::scalar(grad.sum())
    } else {
        grad
    }
}

fn zip_grad<F: Element>(a: &Tensor<F>, g: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.numel(), g.numel());
    let data = a
        .data()
        .iter()
        .zip(g.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against one backward pass.
    ///
    /// `build` assembles a scalar from leaves; gradients of every leaf are
    /// then compared entry-by-entry at relative tolerance `tol`.
    fn check_grads(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
        tol: f64,
    ) {
        let eval = |perturbed: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = perturbed
                .iter()
                .map(|t| tape.leaf(t.clone(), true))
                .collect();
            let out = build(&mut tape, &ids);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out).unwrap();

        let h = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[which]).expect("leaf gradient");
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {which} element {j}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let c = tape.leaf(Tensor::scalar(5.0f64), true);
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        // c never fed the root; its gradient is zero, not missing
        assert_eq!(grads.get(c).unwrap().item(), 0.0);
    }

    #[test]
    fn log_gradient_at_two_is_half() {
        check_grads(
            &[Tensor::scalar(2.0)],
            |tape, ids| {
                let y = tape.ln(ids[0]).unwrap();
                tape.sum(y).unwrap()
            },
            1e-6,
        );
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), true);
        let y = tape.ln(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0f64), true);
        assert!(matches!(tape.ln(x), Err(crate::Error::Domain { .. })));
    }

    #[test]
    fn relu_and_tanh_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[3], &[-1.0f64, 0.0, 2.0]), false);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let t = tape.tanh(x).unwrap();
        assert_eq!(tape.value(t).data()[1], 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[1.0f64, 2.0]), true);
        let y = tape.square(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(crate::Error::NonScalarBackward { numel: 2 })
        ));
    }

    #[test]
    fn tape_consumed_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0f64), true);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(crate::Error::TapeConsumed)));
    }

    #[test]
    fn avg_pool_backward_distributes_equally() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 1, 2, 2], &[1.0f64, 2.0, 3.0, 4.0]), true);
        let p = tape.avg_pool2d(x, 2, 2).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        // d sum(Wx) / dW = ones ⊗ x
        let x_val = tensor(&[1, 3], &[0.5f64, -1.5, 2.0]);
        let w_val = tensor(&[2, 3], &[0.1f64, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone(), false);
        let w = tape.leaf(w_val, true);
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        let gw = grads.get(w).unwrap();
        for row in 0..2 {
            for col in 0..3 {
                assert!((gw.data()[row * 3 + col] - x_val.data()[col]).abs() < 1e-12);
            }
        }
        check_grads(
            &[x_val, tensor(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])],
            |tape, ids| {
                let b = tape.leaf(tensor(&[2], &[0.7, -0.2]), false);
                let y = tape.linear(ids[0], ids[1], Some(b)).unwrap();
                tape.sum(y).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn adjoints_match_finite_differences_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // conv2d
        let x = Tensor::randn(vec![2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(vec![3], 0.5, &mut rng);
        check_grads(&[x, w, b], |tape, ids| {
            let c = tape.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap();
            let sq = tape.square(c).unwrap();
            tape.sum(sq).unwrap()
        }, 1e-4);

        // conv_transpose2d with output padding
        let x = Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(vec![2], 0.5, &mut rng);
        check_grads(&[x, w, b], |tape, ids| {
            let c = tape
                .conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2, 1, 1)
                .unwrap();
            let sq = tape.square(c).unwrap();
            tape.sum(sq).unwrap()
        }, 1e-4);

        // pooling + activations + reductions
        let x = Tensor::randn(vec![1, 2, 4, 4], 1.0, &mut rng);
        check_grads(&[x], |tape, ids| {
            let p = tape.avg_pool2d(ids[0], 2, 2).unwrap();
            let a = tape.leaky_relu(p, 0.01).unwrap();
            let t = tape.tanh(a).unwrap();
            let e = tape.exp(t).unwrap();
            tape.sum(e).unwrap()
        }, 1e-4);

        // matmul, softmax, row/col broadcast ops, div
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let bmat = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let v = Tensor::randn(vec![2], 1.0, &mut rng);
        let u = Tensor::randn(vec![3], 1.0, &mut rng);
        check_grads(&[a, bmat, v, u], |tape, ids| {
            let m = tape.matmul_nt(ids[0], ids[1]).unwrap();
            let m = tape.add_row_vec(m, ids[2]).unwrap();
            let m = tape.add_col_vec(m, ids[3]).unwrap();
            let m = tape.mul_col_vec(m, ids[3]).unwrap();
            let sm = tape.softmax(m).unwrap();
            let c = tape.clamp_min(sm, 1e-12).unwrap();
            let l = tape.ln(c).unwrap();
            let sq = tape.square(l).unwrap();
            tape.sum(sq).unwrap()
        }, 1e-4);

        // pairwise squared distances
        let z = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let phi = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        check_grads(&[z, phi], |tape, ids| {
            let d = tape.pairwise_sq_dist(ids[0], ids[1]).unwrap();
            let sh = tape.add_scalar(d, 1.0).unwrap();
            let l = tape.ln(sh).unwrap();
            tape.sum(l).unwrap()
        }, 1e-4);

        // slicing and gathering
        let m = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        check_grads(&[m], |tape, ids| {
            let sl = tape.slice_rows(ids[0], 1, 2).unwrap();
            let g = tape.row_blocks(ids[0], vec![0, 2, 4, 1], 2).unwrap();
            let gs = tape.sum_axis(g, 1).unwrap();
            let ss = tape.sum_axis(sl, 0).unwrap();
            let s1 = tape.sum(gs).unwrap();
            let s2 = tape.sum(ss).unwrap();
            let sq = tape.mul(s1, s2).unwrap();
            tape.add(sq, s1).unwrap()
        }, 1e-4);

        // scalar broadcasting through binary ops
        let t = Tensor::randn(vec![5], 1.0, &mut rng);
        check_grads(&[t, Tensor::scalar(0.7)], |tape, ids| {
            let sum = tape.mul(ids[0], ids[1]).unwrap();
            let shifted = tape.add(sum, ids[1]).unwrap();
            let denom = tape.add_scalar(ids[1], 2.0).unwrap();
            let q = tape.div(shifted, denom).unwrap();
            let sq = tape.square(q).unwrap();
            tape.sum(sq).unwrap()
        }, 1e-4);
    }

    #[test]
    fn forward_backward_deterministic_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = Tensor::<f64>::randn(vec![1, 1, 6, 6], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(vec![2, 1, 3, 3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xi = tape.leaf(x, true);
            let wi = tape.leaf(w, true);
            let c = tape.conv2d(xi, wi, None, 2, 1).unwrap();
            let a = tape.leaky_relu(c, 0.01).unwrap();
            let sq = tape.square(a).unwrap();
            let s = tape.sum(sq).unwrap();
            let value = tape.value(s).item();
            let grads = tape.backward(s).unwrap();
            (value, grads.get(xi).unwrap().data().to_vec(), grads.get(wi).unwrap().data().to_vec())
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(gx1.len(), gx2.len());
        assert!(gx1.iter().zip(gx2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(gw2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn saved_activations_replay_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(vec![1, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(x, false);
        let wi = tape.leaf(w, false);
        let c = tape.conv2d(xi, wi, None, 2, 1).unwrap();
        let a = tape.tanh(c).unwrap();
        let f = tape.reshape(a, vec![1, 3 * 3 * 3]).unwrap();
        let s = tape.sum(f).unwrap();
        for idx in 0..tape.len() {
            let id = ValueId(idx);
            let replayed = tape.recompute(id).unwrap();
            assert_eq!(replayed.shape(), tape.value(id).shape());
            assert!(replayed
                .data()
                .iter()
                .zip(tape.value(id).data().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let _ = s;
    }
}
