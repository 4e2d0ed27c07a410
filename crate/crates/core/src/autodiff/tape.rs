use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Concat { axis: usize },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softmax,
    Mean,
    Sum,
    Dot,
    L2Normalize,
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    Mean(usize),
    Sum(usize),
    Dot(usize, usize),
    L2Normalize(usize),
    Scale(usize, f64),
    Gather(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    Transpose(usize),
    RowNorm(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of a computation.
///
/// Nodes are appended in evaluation order, so every node's parents have
/// smaller indices and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Zero-norm threshold for `l2_normalize`.
pub const MIN_NORM: f64 = 1e-12;

fn shape_str(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" vs ")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Generic entry point over the primitive operation kinds.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match &kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Dot => 2,
            OpKind::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::domain(
                "apply",
                format!("{kind:?} expects {arity} inputs, got {}", inputs.len()),
            ));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::Sigmoid => self.sigmoid(inputs[0]),
            OpKind::Tanh => self.tanh(inputs[0]),
            OpKind::Exp => self.exp(inputs[0]),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Softmax => self.softmax(inputs[0]),
            OpKind::Mean => self.mean(inputs[0]),
            OpKind::Sum => self.sum(inputs[0]),
            OpKind::Dot => self.dot(inputs[0], inputs[1]),
            OpKind::L2Normalize => self.l2_normalize(inputs[0]),
            OpKind::Scale(s) => self.scale(inputs[0], s),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape("matmul", shape_str(&[va.shape(), vb.shape()])));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise sum. A `[1, n]` or `[n]` right operand is broadcast over
    /// the rows of an `[m, n]` left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
            let shape = va.shape().to_vec();
            return self.push("add", Tensor::from_parts(shape, out), Op::Add(a.0, b.0), &[a.0, b.0]);
        }
        if va.shape().len() == 2 && vb.rows() == 1 && vb.len() == va.cols() {
            let row = vb.data();
            let mut out = va.data().to_vec();
            for chunk in out.chunks_mut(row.len()) {
                chunk.iter_mut().zip(row).for_each(|(x, y)| *x += y);
            }
            let shape = va.shape().to_vec();
            return self.push("add", Tensor::from_parts(shape, out), Op::AddRow(a.0, b.0), &[a.0, b.0]);
        }
        Err(Error::shape("add", shape_str(&[va.shape(), vb.shape()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("sub", shape_str(&[va.shape(), vb.shape()])));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let shape = va.shape().to_vec();
        self.push("sub", Tensor::from_parts(shape, out), Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", shape_str(&[va.shape(), vb.shape()])));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns). Rank-1 inputs may
    /// only be joined along axis 0.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let shapes: Vec<&[usize]> = parts.iter().map(|p| self.nodes[p.0].value.shape()).collect();
        let rank = shapes[0].len();
        let bad = || Error::shape("concat", shape_str(&shapes));
        if rank == 0 || shapes.iter().any(|s| s.len() != rank) || axis >= rank {
            return Err(bad());
        }
        let (shape, data) = if rank == 1 {
            let data: Vec<f64> = parts.iter().flat_map(|p| self.nodes[p.0].value.data().iter().copied()).collect();
            (vec![data.len()], data)
        } else if axis == 0 {
            let cols = shapes[0][1];
            if shapes.iter().any(|s| s[1] != cols) {
                return Err(bad());
            }
            let data: Vec<f64> = parts.iter().flat_map(|p| self.nodes[p.0].value.data().iter().copied()).collect();
            (vec![data.len() / cols, cols], data)
        } else {
            let rows = shapes[0][0];
            if shapes.iter().any(|s| s[0] != rows) {
                return Err(bad());
            }
            let cols: usize = shapes.iter().map(|s| s[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.nodes[p.0].value.row(r));
                }
            }
            (vec![rows, cols], data)
        };
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: idx.clone(),
                axis,
            },
            &idx,
        )
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let out = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        self.push(name, Tensor::from_parts(shape, out), op, &[a.0])
    }

    /// Smallest `|x|` over all relu inputs recorded so far.
    pub(crate) fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.nodes[a.0].value.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {x}")));
        }
        self.unary("log", a, Op::Log(a.0), f64::ln)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a.0, s), |x| x * s)
    }

    /// Softmax along the last axis (row-wise for matrices).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape().is_empty() {
            return Err(Error::shape("softmax", shape_str(&[va.shape()])));
        }
        let cols = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = va.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Inner product of two equally sized tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("dot", shape_str(&[va.shape(), vb.shape()])));
        }
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(a.0, b.0), &[a.0, b.0])
    }

    /// Scales each row (or the whole vector) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let cols = va.cols();
        let mut out = va.data().to_vec();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let norm = norm(row);
            if norm < MIN_NORM {
                return Err(Error::domain("l2_normalize", format!("row {r} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let shape = va.shape().to_vec();
        self.push("l2_normalize", Tensor::from_parts(shape, out), Op::L2Normalize(a.0), &[a.0])
    }

    /// Euclidean norm of each row, as an `[rows, 1]` column. The gradient at a
    /// zero row is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let cols = va.cols();
        let out: Vec<f64> = va.data().chunks(cols).map(norm).collect();
        let rows = out.len();
        self.push("row_norm", Tensor::from_parts(vec![rows, 1], out), Op::RowNorm(a.0), &[a.0])
    }

    /// Selects rows by index (repeats allowed) into a new matrix.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= va.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("{:?} with {} indices", va.shape(), indices.len()),
            ));
        }
        let cols = va.cols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(va.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![indices.len(), cols], out),
            Op::Gather(a.0, indices.to_vec()),
            &[a.0],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let cols = va.cols();
        if va.shape().is_empty() || start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("{:?}[{start}..{end}]", va.shape())));
        }
        let out: Vec<f64> = va.data().chunks(cols).flat_map(|r| r[start..end].iter().copied()).collect();
        let rows = va.rows();
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![rows, end - start], out),
            Op::SliceCols(a.0, start, end),
            &[a.0],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(shape.to_vec(), va.data().to_vec())
            .map_err(|_| Error::shape("reshape", shape_str(&[va.shape(), shape])))?;
        self.push("reshape", t, Op::Reshape(a.0), &[a.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape().is_empty() {
            return Err(Error::shape("transpose", shape_str(&[va.shape()])));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; m * n];
        transpose_into(va.data(), &mut out, m, n);
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a.0), &[a.0])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", root_value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], p: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[p].requires_grad {
            return None;
        }
        let len = self.nodes[p].value.len();
        Some(grads[p].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = self.slot(grads, a) {
                    // dA = G · Bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        let garow = &mut ga[r * k..(r + 1) * k];
                        for (p, gap) in garow.iter_mut().enumerate() {
                            let brow = &vb.data()[p * n..(p + 1) * n];
                            *gap += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB = Aᵀ · G
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = va.data()[r * k + p];
                            if s != 0.0 {
                                axpy(s, grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(1.0, g, gp);
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let n = gb.len();
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, gb);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    axpy(-1.0, g, gb);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    let vb = self.nodes[b].value.data();
                    ga.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (x, y))| *d += x * y);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let va = self.nodes[a].value.data();
                    gb.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (x, y))| *d += x * y);
                }
            }
            Op::Concat { parts, axis } => {
                let rank = out.shape().len();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        if let Some(gp) = self.slot(grads, p) {
                            axpy(1.0, &g[offset..offset + len], gp);
                        }
                        offset += len;
                    }
                } else {
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        if let Some(gp) = self.slot(grads, p) {
                            for (r, grow) in g.chunks(total).enumerate() {
                                axpy(1.0, &grow[offset..offset + c], &mut gp[r * c..(r + 1) * c]);
                            }
                        }
                        offset += c;
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let x = self.nodes[a].value.data();
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y;
                    }
                }
            }
            &Op::Log(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let x = self.nodes[a].value.data();
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(s, g, ga);
                }
            }
            &Op::Softmax(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let cols = out.cols();
                    for ((grow, yrow), drow) in g.chunks(cols).zip(out.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - inner);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::Dot(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(g[0], self.nodes[b].value.data(), ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    axpy(g[0], self.nodes[a].value.data(), gb);
                }
            }
            &Op::L2Normalize(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let x = &self.nodes[a].value;
                    let cols = x.cols();
                    for (r, drow) in ga.chunks_mut(cols).enumerate() {
                        let n = norm(x.row(r));
                        let yrow = &out.data()[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let inner: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gi - y * inner) / n;
                        }
                    }
                }
            }
            &Op::RowNorm(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let x = &self.nodes[a].value;
                    let cols = x.cols();
                    for (r, drow) in ga.chunks_mut(cols).enumerate() {
                        let n = out.data()[r];
                        if n > 0.0 {
                            axpy(g[r] / n, x.row(r), drow);
                        }
                    }
                }
            }
            Op::Gather(a, indices) => {
                let cols = out.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &r) in indices.iter().enumerate() {
                        axpy(1.0, &g[k * cols..(k + 1) * cols], &mut ga[r * cols..(r + 1) * cols]);
                    }
                }
            }
            &Op::SliceCols(a, start, end) => {
                if let Some(ga) = self.slot(grads, a) {
                    let cols = self.nodes[a].value.cols();
                    let w = end - start;
                    for (grow, drow) in g.chunks(w).zip(ga.chunks_mut(cols)) {
                        axpy(1.0, grow, &mut drow[start..end]);
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(1.0, g, ga);
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    // out is [n, m]; parent is [m, n]
                    let (n, m) = (out.rows(), out.cols());
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is unreachable from the root.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// True when a gradient slot was ever written for `v`.
    pub fn touched(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(Option::is_some)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
    // second pass pulls the sum back to 1 within rounding
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= total);
}

#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(d, v)| *d += s * v);
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let s = a[r * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

fn transpose_into(a: &[f64], out: &mut [f64], m: usize, n: usize) {
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a[r * n + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, data: &[f64]) -> Var {
        tape.param(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 4.0, 0.0, 9.0]).unwrap());
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1000.0, 1000.0, -1000.0]);
        let y = tape.softmax(x).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_definition_and_subgradient() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[-1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(&tape, x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[0.0]);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(&tape, x).data(), &[0.0]);
    }

    #[test]
    fn dot_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        let d = tape.dot(x, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(&tape, x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        let unused = vec_var(&mut tape, &[3.0]);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(&tape, unused).data(), &[0.0]);
        assert!(!g.touched(unused));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn log_and_normalize_domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(Error::Domain { .. })));
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn overflow_is_reported_as_non_finite() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn add_broadcasts_row_bias() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[3, 2]));
        let b = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(&tape, b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn apply_dispatches_by_kind() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[-1.0, 2.0]);
        let y = tape.apply(OpKind::Relu, &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        assert!(tape.apply(OpKind::Add, &[x]).is_err());
        let c = tape.apply(OpKind::Concat { axis: 0 }, &[x, y]).unwrap();
        assert_eq!(tape.shape(c), &[4]);
    }
}
