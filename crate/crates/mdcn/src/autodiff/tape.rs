//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operation appends a node holding its forward value and the ids of its
//! parents; `backward` replays the tape in reverse, accumulating adjoints.
//! `input_gradient` emits the closed-form gradient of a scalar-per-row output
//! with respect to one input *as new tape nodes*, so the gradient-penalty term
//! built from it stays differentiable with respect to network parameters.

use super::tensor::{matmul_acc, Tensor};
use crate::error::Error;

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    #[cfg(test)]
    pub(crate) fn from_raw(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// `[n,m] + [1,m]`, broadcasting the row vector over all rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n,m] * [1,m]`, broadcasting the row vector over all rows.
    MulRow(NodeId, NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Mean(NodeId),
    Sum(NodeId),
    /// Sum along each row: `[n,m] -> [n,1]`.
    RowSum(NodeId),
    /// Sum along each column: `[n,m] -> [1,m]`.
    ColSum(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Elu(NodeId),
    /// Derivative of ELU as a forward op; lets the gradient penalty stay on the tape.
    EluGrad(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Concat(Vec<NodeId>),
    SliceRows {
        a: NodeId,
        start: usize,
        end: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        end: usize,
    },
    /// Writes `[n,w]` into columns `start..start+w` of an `[n,total]` zero matrix.
    PadCols {
        a: NodeId,
        total: usize,
        start: usize,
    },
    /// Writes `[r,m]` into rows `start..start+r` of a `[total,m]` zero matrix.
    PadRows {
        a: NodeId,
        start: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Matmul { .. } => "matmul",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::ColSum(..) => "col_sum",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Elu(..) => "elu",
            Op::EluGrad(..) => "elu_grad",
            Op::Sigmoid(..) => "sigmoid",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat(..) => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::PadRows { .. } => "pad_rows",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Mean(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::ColSum(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Elu(a)
            | Op::EluGrad(a)
            | Op::Sigmoid(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::PadCols { a, .. }
            | Op::PadRows { a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn elu_second(x: f64) -> f64 {
    if x > 0.0 {
        0.0
    } else {
        x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dynamic computation tape. One tape per forward/backward pass; graphs are
/// single-threaded and never shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input tensor. `requires_grad` marks it as a parameter to
    /// receive gradients during `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward` call (zeros if untouched).
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn assert_same_shape(&self, a: NodeId, b: NodeId, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn is_row_broadcast(&self, a: NodeId, b: NodeId) -> bool {
        let sa = self.shape(a);
        let sb = self.shape(b);
        sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sa[1] == sb[1]
    }

    // ---- forward ops -------------------------------------------------

    /// Elementwise sum; also accepts `[n,m] + [1,m]` with row broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.shape(a) != self.shape(b) && self.is_row_broadcast(a, b) {
            let (n, m) = (self.shape(a)[0], self.shape(a)[1]);
            let mut data = self.nodes[a.0].value.data().to_vec();
            let brow = self.nodes[b.0].value.data();
            for i in 0..n {
                for j in 0..m {
                    data[i * m + j] += brow[j];
                }
            }
            return self.push(Tensor::matrix(n, m, data), Op::AddRow(a, b));
        }
        self.assert_same_shape(a, b, "add");
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Sub(a, b))
    }

    /// Elementwise product; also accepts `[n,m] * [1,m]` with row broadcast.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.shape(a) != self.shape(b) && self.is_row_broadcast(a, b) {
            let (n, m) = (self.shape(a)[0], self.shape(a)[1]);
            let mut data = self.nodes[a.0].value.data().to_vec();
            let brow = self.nodes[b.0].value.data();
            for i in 0..n {
                for j in 0..m {
                    data[i * m + j] *= brow[j];
                }
            }
            return self.push(Tensor::matrix(n, m, data), Op::MulRow(a, b));
        }
        self.assert_same_shape(a, b, "mul");
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul: need 2-d operands, got {:?} and {:?}",
            sa,
            sb
        );
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(
            ka, kb,
            "matmul: inner dimension mismatch {:?} (ta={}) vs {:?} (tb={})",
            sa, ta, sb, tb
        );
        let mut out = vec![0.0; m * n];
        matmul_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
            ta,
            tb,
        );
        self.push(Tensor::matrix(m, n, out), Op::Matmul { a, b, ta, tb })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel() as f64;
        assert!(n > 0.0, "mean of empty tensor");
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (n, m) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let d = self.nodes[a.0].value.data();
        let out: Vec<f64> = (0..n).map(|i| d[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Tensor::matrix(n, 1, out), Op::RowSum(a))
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let (n, m) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += d[i * m + j];
            }
        }
        self.push(Tensor::matrix(1, m, out), Op::ColSum(a))
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, a: NodeId, f: F, op: Op) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, elu, Op::Elu(a))
    }

    /// ELU derivative as a differentiable forward op.
    pub fn elu_grad(&mut self, a: NodeId) -> NodeId {
        self.unary(a, elu_prime, Op::EluGrad(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Stacks parts by rows.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero nodes");
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = Tensor::concat_rows(&tensors);
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = &self.nodes[a.0].value;
        assert!(
            start < end && end <= v.rows(),
            "slice_rows {}..{} out of bounds for {:?}",
            start,
            end,
            v.shape()
        );
        let out = v.slice_rows(start, end);
        self.push(out, Op::SliceRows { a, start, end })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = &self.nodes[a.0].value;
        let (n, m) = (v.rows(), v.cols());
        assert!(
            start < end && end <= m,
            "slice_cols {}..{} out of bounds for {:?}",
            start,
            end,
            v.shape()
        );
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&v.data()[i * m + start..i * m + end]);
        }
        self.push(Tensor::matrix(n, w, data), Op::SliceCols { a, start, end })
    }

    pub fn pad_cols(&mut self, a: NodeId, total: usize, start: usize) -> NodeId {
        let v = &self.nodes[a.0].value;
        let (n, w) = (v.rows(), v.cols());
        assert!(start + w <= total, "pad_cols out of bounds");
        let mut data = vec![0.0; n * total];
        for i in 0..n {
            data[i * total + start..i * total + start + w]
                .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
        }
        self.push(Tensor::matrix(n, total, data), Op::PadCols { a, total, start })
    }

    pub fn pad_rows(&mut self, a: NodeId, total: usize, start: usize) -> NodeId {
        let v = &self.nodes[a.0].value;
        let (r, m) = (v.rows(), v.cols());
        assert!(start + r <= total, "pad_rows out of bounds");
        let mut data = vec![0.0; total * m];
        data[start * m..(start + r) * m].copy_from_slice(v.data());
        self.push(Tensor::matrix(total, m, data), Op::PadRows { a, start })
    }

    // ---- reverse pass ------------------------------------------------

    /// Accumulates gradients of the scalar `root` into every node that
    /// requires them. Visits the tape once, in reverse order.
    pub fn backward(&mut self, root: NodeId) -> Result<(), Error> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize) {
        let op = self.nodes[id].op.clone();
        // Parents always precede children on the tape, so split at `id`.
        let (parents, rest) = self.nodes.split_at_mut(id);
        let child = &rest[0];
        let g = child.grad.as_ref().expect("missing child grad");
        let gd = g.data();
        let acc = |nodes: &mut [Node], p: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p.0].requires_grad {
                return;
            }
            let shape = nodes[p.0].value.shape().to_vec();
            let grad = nodes[p.0].grad.get_or_insert_with(|| Tensor::zeros(shape));
            f(grad.data_mut());
        };
        // Unary rules need the parent's value while mutating its grad; a copy
        // of the value sidesteps the aliased borrow.
        let parent_value =
            |nodes: &[Node], p: NodeId| -> Tensor { nodes[p.0].value.clone() };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(parents, a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
                acc(parents, b, &mut |gb| {
                    for (x, y) in gb.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(parents, a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
                let m = child.value.cols();
                let n = child.value.rows();
                acc(parents, b, &mut |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += gd[i * m + j];
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(parents, a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
                acc(parents, b, &mut |gb| {
                    for (x, y) in gb.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                if parents[a.0].requires_grad {
                    let bv = parent_value(parents, b);
                    acc(parents, a, &mut |ga| {
                        for ((x, y), z) in ga.iter_mut().zip(gd).zip(bv.data()) {
                            *x += y * z;
                        }
                    });
                }
                if parents[b.0].requires_grad {
                    let av = parent_value(parents, a);
                    acc(parents, b, &mut |gb| {
                        for ((x, y), z) in gb.iter_mut().zip(gd).zip(av.data()) {
                            *x += y * z;
                        }
                    });
                }
            }
            Op::MulRow(a, b) => {
                let (n, m) = (child.value.rows(), child.value.cols());
                if parents[a.0].requires_grad {
                    let bv = parent_value(parents, b);
                    acc(parents, a, &mut |ga| {
                        for i in 0..n {
                            for j in 0..m {
                                ga[i * m + j] += gd[i * m + j] * bv.data()[j];
                            }
                        }
                    });
                }
                if parents[b.0].requires_grad {
                    let av = parent_value(parents, a);
                    acc(parents, b, &mut |gb| {
                        for i in 0..n {
                            for j in 0..m {
                                gb[j] += gd[i * m + j] * av.data()[i * m + j];
                            }
                        }
                    });
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (m, k) = {
                    let av = &parents[a.0].value;
                    if ta {
                        (av.cols(), av.rows())
                    } else {
                        (av.rows(), av.cols())
                    }
                };
                let n = {
                    let bv = &parents[b.0].value;
                    if tb {
                        bv.rows()
                    } else {
                        bv.cols()
                    }
                };
                // c = op(a) . op(b); accumulate d_a and d_b.
                if parents[a.0].requires_grad {
                    let bv = parent_value(parents, b);
                    acc(parents, a, &mut |ga| match ta {
                        false => {
                            // d_a = g . op(b)^T
                            matmul_acc(ga, gd, bv.data(), m, n, k, false, !tb);
                        }
                        true => {
                            // a stored k x m; d_a = op(b) . g^T
                            matmul_acc(ga, bv.data(), gd, k, n, m, tb, true);
                        }
                    });
                }
                if parents[b.0].requires_grad {
                    let av = parent_value(parents, a);
                    acc(parents, b, &mut |gb| match tb {
                        false => {
                            // d_b = op(a)^T . g
                            matmul_acc(gb, av.data(), gd, k, m, n, !ta, false);
                        }
                        true => {
                            // b stored n x k; d_b = g^T . op(a)
                            matmul_acc(gb, gd, av.data(), n, m, k, true, ta);
                        }
                    });
                }
            }
            Op::Mean(a) => {
                let g0 = gd[0] / parents[a.0].value.numel() as f64;
                acc(parents, a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x += g0;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(parents, a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x += g0;
                    }
                });
            }
            Op::RowSum(a) => {
                let m = parents[a.0].value.cols();
                let n = parents[a.0].value.rows();
                acc(parents, a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += gd[i];
                        }
                    }
                });
            }
            Op::ColSum(a) => {
                let m = parents[a.0].value.cols();
                let n = parents[a.0].value.rows();
                acc(parents, a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += gd[j];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = parent_value(parents, a);
                acc(parents, a, &mut |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        *x += y * if v >= 0.0 { 1.0 } else { -1.0 };
                    }
                });
            }
            Op::Square(a) => {
                let av = parent_value(parents, a);
                acc(parents, a, &mut |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        *x += y * 2.0 * v;
                    }
                });
            }
            Op::Sqrt(a) => {
                let av = parent_value(parents, a);
                acc(parents, a, &mut |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        *x += y * 0.5 / v.sqrt();
                    }
                });
            }
            Op::Elu(a) => {
                let av = parent_value(parents, a);
                acc(parents, a, &mut |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        *x += y * elu_prime(v);
                    }
                });
            }
            Op::EluGrad(a) => {
                let av = parent_value(parents, a);
                acc(parents, a, &mut |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                        *x += y * elu_second(v);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let sv = &child.value;
                acc(parents, a, &mut |ga| {
                    for ((x, y), &s) in ga.iter_mut().zip(gd).zip(sv.data()) {
                        *x += y * s * (1.0 - s);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(parents, a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(gd) {
                        *x += c * y;
                    }
                });
            }
            Op::AddScalar(a) => {
                acc(parents, a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
            }
            Op::Concat(parts) => {
                let m = child.value.cols();
                let mut row = 0;
                for p in parts {
                    let r = parents[p.0].value.rows();
                    let lo = row * m;
                    let hi = (row + r) * m;
                    acc(parents, p, &mut |gp| {
                        for (x, y) in gp.iter_mut().zip(&gd[lo..hi]) {
                            *x += y;
                        }
                    });
                    row += r;
                }
            }
            Op::SliceRows { a, start, end } => {
                let m = parents[a.0].value.cols();
                acc(parents, a, &mut |ga| {
                    for (x, y) in ga[start * m..end * m].iter_mut().zip(gd) {
                        *x += y;
                    }
                });
            }
            Op::SliceCols { a, start, end } => {
                let m = parents[a.0].value.cols();
                let n = parents[a.0].value.rows();
                let w = end - start;
                acc(parents, a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..w {
                            ga[i * m + start + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::PadCols { a, total, start } => {
                let n = parents[a.0].value.rows();
                let w = parents[a.0].value.cols();
                acc(parents, a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..w {
                            ga[i * w + j] += gd[i * total + start + j];
                        }
                    }
                });
            }
            Op::PadRows { a, start, .. } => {
                let r = parents[a.0].value.rows();
                let m = parents[a.0].value.cols();
                acc(parents, a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(&gd[start * m..(start + r) * m]) {
                        *x += y;
                    }
                });
            }
        }
    }

    // ---- symbolic input gradient --------------------------------------

    /// Given `output` with one scalar per row, each depending only on the
    /// matching row of `wrt`, emits tape nodes computing `d output / d wrt`
    /// (same shape as `wrt`). The result participates in later `backward`
    /// calls, which is what the gradient penalty needs.
    ///
    /// Only the op set reachable in feedforward affine/ELU stacks is
    /// supported; anything else on the path is reported by name.
    pub fn input_gradient(&mut self, output: NodeId, wrt: NodeId) -> Result<NodeId, Error> {
        // Forward closure: which nodes depend on `wrt`.
        let mut depends = vec![false; output.0 + 1];
        depends[wrt.0] = true;
        for id in wrt.0 + 1..=output.0 {
            let ps = self.nodes[id].op.parents();
            if ps.iter().any(|p| depends[p.0]) {
                depends[id] = true;
            }
        }
        if !depends[output.0] {
            let z = Tensor::zeros(self.shape(wrt).to_vec());
            return Ok(self.constant(z));
        }

        let out_shape = self.shape(output).to_vec();
        let ones = Tensor::full(out_shape, 1.0);
        let seed = self.constant(ones);
        let mut adjoint: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        adjoint[output.0] = Some(seed);

        for id in (wrt.0 + 1..=output.0).rev() {
            if !depends[id] {
                continue;
            }
            let up = match adjoint[id] {
                Some(n) => n,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            let contribute =
                |tape: &mut Tape, adjoint: &mut Vec<Option<NodeId>>, p: NodeId, g: NodeId| {
                    if !depends[p.0] {
                        return;
                    }
                    adjoint[p.0] = Some(match adjoint[p.0] {
                        Some(prev) => tape.add(prev, g),
                        None => g,
                    });
                };
            match op {
                Op::Add(a, b) => {
                    contribute(self, &mut adjoint, a, up);
                    contribute(self, &mut adjoint, b, up);
                }
                Op::AddRow(a, b) => {
                    contribute(self, &mut adjoint, a, up);
                    if depends[b.0] {
                        let g = self.col_sum(up);
                        contribute(self, &mut adjoint, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    contribute(self, &mut adjoint, a, up);
                    if depends[b.0] {
                        let g = self.scale(up, -1.0);
                        contribute(self, &mut adjoint, b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if depends[a.0] {
                        let g = self.mul(up, b);
                        contribute(self, &mut adjoint, a, g);
                    }
                    if depends[b.0] {
                        let g = self.mul(up, a);
                        contribute(self, &mut adjoint, b, g);
                    }
                }
                Op::MulRow(a, b) => {
                    if depends[a.0] {
                        let g = self.mul(up, b);
                        contribute(self, &mut adjoint, a, g);
                    }
                    if depends[b.0] {
                        let prod = self.mul(up, a);
                        let g = self.col_sum(prod);
                        contribute(self, &mut adjoint, b, g);
                    }
                }
                Op::Matmul { a, b, ta, tb } => {
                    if depends[a.0] {
                        let g = if ta {
                            self.matmul_t(b, up, tb, true)
                        } else {
                            self.matmul_t(up, b, false, !tb)
                        };
                        contribute(self, &mut adjoint, a, g);
                    }
                    if depends[b.0] {
                        let g = if tb {
                            self.matmul_t(up, a, true, ta)
                        } else {
                            self.matmul_t(a, up, !ta, false)
                        };
                        contribute(self, &mut adjoint, b, g);
                    }
                }
                Op::Elu(a) => {
                    let d = self.elu_grad(a);
                    let g = self.mul(up, d);
                    contribute(self, &mut adjoint, a, g);
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    let g = self.mul(up, two_a);
                    contribute(self, &mut adjoint, a, g);
                }
                Op::Scale(a, c) => {
                    let g = self.scale(up, c);
                    contribute(self, &mut adjoint, a, g);
                }
                Op::AddScalar(a) => {
                    contribute(self, &mut adjoint, a, up);
                }
                Op::Concat(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let r = self.nodes[p.0].value.rows();
                        if depends[p.0] {
                            let g = self.slice_rows(up, row, row + r);
                            contribute(self, &mut adjoint, p, g);
                        }
                        row += r;
                    }
                }
                Op::SliceRows { a, start, end } => {
                    let total = self.nodes[a.0].value.rows();
                    let _ = end;
                    let g = self.pad_rows(up, total, start);
                    contribute(self, &mut adjoint, a, g);
                }
                Op::SliceCols { a, start, end } => {
                    let total = self.nodes[a.0].value.cols();
                    let _ = end;
                    let g = self.pad_cols(up, total, start);
                    contribute(self, &mut adjoint, a, g);
                }
                Op::PadCols { a, start, .. } => {
                    let w = self.nodes[a.0].value.cols();
                    let g = self.slice_cols(up, start, start + w);
                    contribute(self, &mut adjoint, a, g);
                }
                Op::PadRows { a, start, .. } => {
                    let r = self.nodes[a.0].value.rows();
                    let g = self.slice_rows(up, start, start + r);
                    contribute(self, &mut adjoint, a, g);
                }
                other => {
                    return Err(Error::Autodiff(format!(
                        "input_gradient: op '{}' is not supported on the differentiated path",
                        other.name()
                    )));
                }
            }
        }
        match adjoint[wrt.0] {
            Some(n) => Ok(n),
            None => {
                let z = Tensor::zeros(self.shape(wrt).to_vec());
                Ok(self.constant(z))
            }
        }
    }
}
