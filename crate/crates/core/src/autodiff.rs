//! Reverse-mode automatic differentiation over rank-2 arrays.
//!
//! An [`ExprGraph`] is an append-only list of nodes. Parents always precede
//! children, so node ids are a topological order. Values are computed lazily
//! by [`ExprGraph::evaluate`] and memoized until an input is rebound.
//!
//! [`ExprGraph::gradient`] does not compute numbers. It appends new nodes that
//! express the adjoint of every requested input in terms of existing nodes.
//! Those gradient nodes are ordinary graph nodes, so a loss may contain a
//! gradient (the WGAN-GP penalty does) and still be differentiated again.
//!
//! Ops that only exist to express derivatives (`Step`, `LeakyStep`,
//! `ArgmaxMask`, `StopGradient`) have zero derivative themselves, which is
//! exact almost everywhere.

use thiserror::Error;

use crate::array::{matmul_into, Array, ArrayError};

/// Smoothing added under the square root of every row norm, so the norm is
/// differentiable at the origin.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("input node {0} has no bound value")]
    Unbound(usize),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("graph values must be rank-2, got {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("{op} at node {node} produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient output must be a 1x1 scalar, node {node} has shape {shape:?}")]
    NotScalar { node: usize, shape: (usize, usize) },
    #[error("slice {start}..{end} out of range for extent {extent}")]
    SliceRange {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error(transparent)]
    Array(#[from] ArrayError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    Transpose,
    /// Sum of all entries, `1×1`.
    Sum,
    /// Mean of all entries, `1×1`.
    Mean,
    /// Sum along an axis, keeping it as extent 1.
    SumAxis(usize),
    /// Maximum along an axis, keeping it as extent 1.
    MaxAxis(usize),
    Square,
    Sqrt,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Zero padding along an axis; the adjoint of `Slice`.
    Pad {
        axis: usize,
        before: usize,
        after: usize,
    },
    /// Broadcast extent-1 axes up to the target shape.
    Broadcast(usize, usize),
    StopGradient,
    /// `1` where the parent is positive, else `0`.
    Step,
    /// `1` where the parent is positive, else the slope.
    LeakyStep(f64),
    /// One-hot of the first maximum along an axis.
    ArgmaxMask(usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add-scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum-axis",
            Op::MaxAxis(_) => "max",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Broadcast(..) => "broadcast",
            Op::StopGradient => "stop-gradient",
            Op::Step => "step",
            Op::LeakyStep(_) => "leaky-step",
            Op::ArgmaxMask(_) => "argmax-mask",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExprNode {
    pub id: NodeId,
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub shape: (usize, usize),
    /// Set for nodes appended by [`ExprGraph::gradient`].
    pub from_gradient: bool,
    value: Option<Array>,
}

impl ExprNode {
    pub fn value(&self) -> Option<&Array> {
        self.value.as_ref()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<ExprNode>,
    building_gradient: bool,
}

fn dims_of(a: &Array) -> Result<(usize, usize)> {
    a.dims()
        .map_err(|_| AutodiffError::NotMatrix(a.shape().to_vec()))
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&ExprNode> {
        self.nodes
            .get(id.0)
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn nodes(&self) -> &[ExprNode] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    /// Cached value, if the node has been evaluated.
    pub fn value(&self, id: NodeId) -> Option<&Array> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: (usize, usize), value: Option<Array>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(ExprNode {
            id,
            op,
            parents,
            shape,
            from_gradient: self.building_gradient,
            value,
        });
        id
    }

    /// An unbound input placeholder of the given shape.
    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input, vec![], (rows, cols), None)
    }

    /// An input bound to `value` at creation.
    pub fn constant(&mut self, value: Array) -> Result<NodeId> {
        let shape = dims_of(&value)?;
        Ok(self.push(Op::Input, vec![], shape, Some(value)))
    }

    /// Binds (or rebinds) an input. All derived values are invalidated.
    pub fn bind(&mut self, id: NodeId, value: Array) -> Result<()> {
        let node = self.node(id)?;
        if node.op != Op::Input {
            return Err(AutodiffError::UnknownNode(id.0));
        }
        let shape = dims_of(&value)?;
        if shape != node.shape {
            return Err(AutodiffError::Shape {
                op: "bind",
                left: node.shape,
                right: shape,
            });
        }
        for n in &mut self.nodes {
            if n.op != Op::Input {
                n.value = None;
            }
        }
        self.nodes[id.0].value = Some(value);
        Ok(())
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(id.0));
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let s = self.same_shape(op.name(), a, b)?;
        Ok(self.push(op, vec![a, b], s, None))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.shape(a);
        Ok(self.push(op, vec![a], s, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(Op::Scale(k), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(Op::AddScalar(k), a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Op::LeakyRelu(slope), a)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::StopGradient, a)
    }

    fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Step, a)
    }

    fn leaky_step(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Op::LeakyStep(slope), a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        Ok(self.push(Op::MatMul, vec![a, b], (sa.0, sb.1), None))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Transpose, vec![a], (c, r), None))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        Ok(self.push(Op::Sum, vec![a], (1, 1), None))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        Ok(self.push(Op::Mean, vec![a], (1, 1), None))
    }

    fn reduced_shape(&self, a: NodeId, axis: usize) -> Result<(usize, usize)> {
        let (r, c) = self.shape(a);
        match axis {
            0 => Ok((1, c)),
            1 => Ok((r, 1)),
            _ => Err(AutodiffError::NotMatrix(vec![r, c, axis])),
        }
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.reduced_shape(a, axis)?;
        Ok(self.push(Op::SumAxis(axis), vec![a], s, None))
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.reduced_shape(a, axis)?;
        Ok(self.push(Op::MaxAxis(axis), vec![a], s, None))
    }

    fn argmax_mask(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.unary(Op::ArgmaxMask(axis), a)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.check(parts)?;
        let first = match parts.first() {
            Some(&p) => self.shape(p),
            None => return Err(AutodiffError::NotMatrix(vec![])),
        };
        let mut shape = first;
        for &p in &parts[1..] {
            let s = self.shape(p);
            match axis {
                0 if s.1 == first.1 => shape.0 += s.0,
                1 if s.0 == first.0 => shape.1 += s.1,
                _ => {
                    return Err(AutodiffError::Shape {
                        op: "concat",
                        left: first,
                        right: s,
                    })
                }
            }
        }
        Ok(self.push(Op::Concat(axis), parts.to_vec(), shape, None))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let (r, c) = self.shape(a);
        let extent = if axis == 0 { r } else { c };
        if start > end || end > extent || axis > 1 {
            return Err(AutodiffError::SliceRange { start, end, extent });
        }
        let shape = if axis == 0 { (end - start, c) } else { (r, end - start) };
        Ok(self.push(Op::Slice { axis, start, end }, vec![a], shape, None))
    }

    fn pad(&mut self, a: NodeId, axis: usize, before: usize, after: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let (r, c) = self.shape(a);
        let shape = if axis == 0 {
            (r + before + after, c)
        } else {
            (r, c + before + after)
        };
        Ok(self.push(Op::Pad { axis, before, after }, vec![a], shape, None))
    }

    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let (r, c) = self.shape(a);
        if (r != rows && r != 1) || (c != cols && c != 1) {
            return Err(AutodiffError::Shape {
                op: "broadcast",
                left: (r, c),
                right: (rows, cols),
            });
        }
        if (r, c) == (rows, cols) {
            return Ok(a);
        }
        Ok(self.push(Op::Broadcast(rows, cols), vec![a], (rows, cols), None))
    }

    /// Per-row Euclidean norm `sqrt(Σ x² + ε)`, shape `r×1`.
    pub fn row_norms(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        let s = self.sum_axis(sq, 1)?;
        let s = self.add_scalar(s, NORM_EPS)?;
        self.sqrt(s)
    }

    /// Numerically stable per-row log-sum-exp, shape `r×1`.
    pub fn row_logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let m = self.max_axis(a, 1)?;
        let m = self.stop_gradient(m)?;
        let mb = self.broadcast(m, r, c)?;
        let shifted = self.sub(a, mb)?;
        let e = self.exp(shifted)?;
        let s = self.sum_axis(e, 1)?;
        let l = self.log(s)?;
        self.add(l, m)
    }

    /// Computes the value of `id` and every ancestor that lacks one.
    pub fn evaluate(&mut self, id: NodeId) -> Result<&Array> {
        self.check(&[id])?;
        let mut needed = vec![false; id.0 + 1];
        let mut stack = vec![id.0];
        while let Some(n) = stack.pop() {
            if needed[n] || self.nodes[n].value.is_some() {
                continue;
            }
            if self.nodes[n].op == Op::Input {
                return Err(AutodiffError::Unbound(n));
            }
            needed[n] = true;
            for p in &self.nodes[n].parents {
                stack.push(p.0);
            }
        }
        for n in 0..=id.0 {
            if needed[n] {
                let v = self.compute(n)?;
                if !v.is_finite() {
                    return Err(AutodiffError::NonFinite {
                        node: n,
                        op: self.nodes[n].op.name(),
                    });
                }
                self.nodes[n].value = Some(v);
            }
        }
        Ok(self.nodes[id.0].value.as_ref().expect("evaluated"))
    }

    /// Evaluates and clones.
    pub fn eval_array(&mut self, id: NodeId) -> Result<Array> {
        self.evaluate(id).cloned()
    }

    pub fn eval_scalar(&mut self, id: NodeId) -> Result<f64> {
        Ok(self.evaluate(id)?.data()[0])
    }

    fn val(&self, id: NodeId) -> &Array {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parent evaluated before child")
    }

    fn compute(&self, n: usize) -> Result<Array> {
        let node = &self.nodes[n];
        let (rows, cols) = node.shape;
        let p = &node.parents;
        let out = match &node.op {
            Op::Input => unreachable!("inputs are bound, not computed"),
            Op::Add => self.val(p[0]).add(self.val(p[1]))?,
            Op::Sub => self.val(p[0]).sub(self.val(p[1]))?,
            Op::Mul => self.val(p[0]).zip_map(self.val(p[1]), "mul", |a, b| a * b)?,
            Op::Div => self.val(p[0]).zip_map(self.val(p[1]), "div", |a, b| a / b)?,
            Op::Neg => self.val(p[0]).map(|v| -v),
            Op::Scale(k) => self.val(p[0]).scale(*k),
            Op::AddScalar(k) => self.val(p[0]).map(|v| v + k),
            Op::MatMul => {
                let (a, b) = (self.val(p[0]), self.val(p[1]));
                let k = a.cols();
                let mut out = vec![0.0; rows * cols];
                matmul_into(a.data(), b.data(), &mut out, rows, k, cols);
                Array::matrix(rows, cols, out)?
            }
            Op::Transpose => self.val(p[0]).transpose()?,
            Op::Sum => Array::scalar(self.val(p[0]).sum()),
            Op::Mean => Array::scalar(self.val(p[0]).mean()),
            Op::SumAxis(axis) => {
                let a = self.val(p[0]);
                let (r, c) = (a.rows(), a.cols());
                let mut out = vec![0.0; rows * cols];
                for i in 0..r {
                    for (j, &v) in a.row_slice(i).iter().enumerate() {
                        if *axis == 0 {
                            out[j] += v;
                        } else {
                            out[i] += v;
                        }
                    }
                }
                let _ = c;
                Array::matrix(rows, cols, out)?
            }
            Op::MaxAxis(axis) => {
                let a = self.val(p[0]);
                let mut out = vec![f64::NEG_INFINITY; rows * cols];
                for i in 0..a.rows() {
                    for (j, &v) in a.row_slice(i).iter().enumerate() {
                        let slot = if *axis == 0 { j } else { i };
                        if v > out[slot] {
                            out[slot] = v;
                        }
                    }
                }
                Array::matrix(rows, cols, out)?
            }
            Op::ArgmaxMask(axis) => {
                let a = self.val(p[0]);
                let (r, c) = (a.rows(), a.cols());
                let mut out = Array::zeros(&[r, c]);
                if *axis == 1 {
                    for i in 0..r {
                        let row = a.row_slice(i);
                        let mut best = 0;
                        for j in 1..c {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        if c > 0 {
                            out.set(i, best, 1.0);
                        }
                    }
                } else {
                    for j in 0..c {
                        let mut best = 0;
                        for i in 1..r {
                            if a.get(i, j) > a.get(best, j) {
                                best = i;
                            }
                        }
                        if r > 0 {
                            out.set(best, j, 1.0);
                        }
                    }
                }
                out
            }
            Op::Square => self.val(p[0]).map(|v| v * v),
            Op::Sqrt => self.val(p[0]).map(f64::sqrt),
            Op::Exp => self.val(p[0]).map(f64::exp),
            Op::Log => self.val(p[0]).map(f64::ln),
            Op::Relu => self.val(p[0]).map(|v| v.max(0.0)),
            Op::LeakyRelu(s) => self.val(p[0]).map(|v| if v > 0.0 { v } else { s * v }),
            Op::Step => self.val(p[0]).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyStep(s) => self.val(p[0]).map(|v| if v > 0.0 { 1.0 } else { *s }),
            Op::StopGradient => self.val(p[0]).clone(),
            Op::Concat(axis) => {
                let mut out = Array::zeros(&[rows, cols]);
                let mut offset = 0;
                for &pid in p {
                    let a = self.val(pid);
                    for i in 0..a.rows() {
                        for j in 0..a.cols() {
                            if *axis == 0 {
                                out.set(offset + i, j, a.get(i, j));
                            } else {
                                out.set(i, offset + j, a.get(i, j));
                            }
                        }
                    }
                    offset += if *axis == 0 { a.rows() } else { a.cols() };
                }
                out
            }
            Op::Slice { axis, start, .. } => {
                let a = self.val(p[0]);
                let mut out = Array::zeros(&[rows, cols]);
                for i in 0..rows {
                    for j in 0..cols {
                        let v = if *axis == 0 {
                            a.get(start + i, j)
                        } else {
                            a.get(i, start + j)
                        };
                        out.set(i, j, v);
                    }
                }
                out
            }
            Op::Pad { axis, before, .. } => {
                let a = self.val(p[0]);
                let mut out = Array::zeros(&[rows, cols]);
                for i in 0..a.rows() {
                    for j in 0..a.cols() {
                        if *axis == 0 {
                            out.set(before + i, j, a.get(i, j));
                        } else {
                            out.set(i, before + j, a.get(i, j));
                        }
                    }
                }
                out
            }
            Op::Broadcast(..) => {
                let a = self.val(p[0]);
                let (r, c) = (a.rows(), a.cols());
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let si = if r == 1 { 0 } else { i };
                    for j in 0..cols {
                        let sj = if c == 1 { 0 } else { j };
                        data.push(a.get(si, sj));
                    }
                }
                Array::matrix(rows, cols, data)?
            }
        };
        Ok(out)
    }

    /// Appends nodes computing `∂output/∂input` for each input, returning
    /// their ids in order. `output` must be `1×1`. An input that `output`
    /// does not depend on gets a zero constant of its shape.
    pub fn gradient(&mut self, output: NodeId, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(&[output])?;
        self.check(inputs)?;
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar {
                node: output.0,
                shape,
            });
        }
        let was_building = self.building_gradient;
        self.building_gradient = true;
        let result = self.backprop(output, inputs);
        self.building_gradient = was_building;
        result
    }

    fn backprop(&mut self, output: NodeId, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        let n = output.0 + 1;
        // Nodes on some path from a requested input.
        let mut reaches = vec![false; n];
        for &i in inputs {
            if i.0 < n {
                reaches[i.0] = true;
            }
        }
        for k in 0..n {
            if !reaches[k] && self.nodes[k].parents.iter().any(|p| reaches[p.0]) {
                reaches[k] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        let seed = self.constant(Array::scalar(1.0))?;
        adjoint[output.0] = Some(seed);

        for k in (0..n).rev() {
            let Some(g) = adjoint[k] else { continue };
            if !reaches[k] {
                continue;
            }
            let node_id = NodeId(k);
            let parents = self.nodes[k].parents.clone();
            for (slot, &parent) in parents.iter().enumerate() {
                if !reaches[parent.0] {
                    continue;
                }
                if let Some(contrib) = self.vjp(node_id, slot, g)? {
                    adjoint[parent.0] = Some(match adjoint[parent.0] {
                        Some(prev) => self.add(prev, contrib)?,
                        None => contrib,
                    });
                }
            }
        }

        inputs
            .iter()
            .map(|&i| match adjoint.get(i.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.shape(i);
                    self.constant(Array::zeros(&[r, c]))
                }
            })
            .collect()
    }

    /// Contribution of `node`'s adjoint `g` to its parent at `slot`.
    fn vjp(&mut self, node: NodeId, slot: usize, g: NodeId) -> Result<Option<NodeId>> {
        let op = self.nodes[node.0].op.clone();
        let parents = self.nodes[node.0].parents.clone();
        let x = parents[slot];
        let (pr, pc) = self.shape(x);
        let out = match op {
            Op::Input
            | Op::StopGradient
            | Op::Step
            | Op::LeakyStep(_)
            | Op::ArgmaxMask(_) => return Ok(None),
            Op::Add => g,
            Op::Sub => {
                if slot == 0 {
                    g
                } else {
                    self.neg(g)?
                }
            }
            Op::Mul => {
                let other = parents[1 - slot];
                self.mul(g, other)?
            }
            Op::Div => {
                let (a, b) = (parents[0], parents[1]);
                let ga = self.div(g, b)?;
                if slot == 0 {
                    ga
                } else {
                    let q = self.div(a, b)?;
                    let t = self.mul(ga, q)?;
                    self.neg(t)?
                }
            }
            Op::Neg => self.neg(g)?,
            Op::Scale(k) => self.scale(g, k)?,
            Op::AddScalar(_) => g,
            Op::MatMul => {
                let (a, b) = (parents[0], parents[1]);
                if slot == 0 {
                    let bt = self.transpose(b)?;
                    self.matmul(g, bt)?
                } else {
                    let at = self.transpose(a)?;
                    self.matmul(at, g)?
                }
            }
            Op::Transpose => self.transpose(g)?,
            Op::Sum => self.broadcast(g, pr, pc)?,
            Op::Mean => {
                let count = (pr * pc).max(1) as f64;
                let b = self.broadcast(g, pr, pc)?;
                self.scale(b, 1.0 / count)?
            }
            Op::SumAxis(_) => self.broadcast(g, pr, pc)?,
            Op::MaxAxis(axis) => {
                let b = self.broadcast(g, pr, pc)?;
                let mask = self.argmax_mask(x, axis)?;
                self.mul(b, mask)?
            }
            Op::Square => {
                let two_x = self.scale(x, 2.0)?;
                self.mul(g, two_x)?
            }
            Op::Sqrt => {
                let half = self.scale(g, 0.5)?;
                self.div(half, node)?
            }
            Op::Exp => self.mul(g, node)?,
            Op::Log => self.div(g, x)?,
            Op::Relu => {
                let m = self.step(x)?;
                self.mul(g, m)?
            }
            Op::LeakyRelu(s) => {
                let m = self.leaky_step(x, s)?;
                self.mul(g, m)?
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                for &p in &parents[..slot] {
                    let s = self.shape(p);
                    offset += if axis == 0 { s.0 } else { s.1 };
                }
                let width = if axis == 0 { pr } else { pc };
                self.slice(g, axis, offset, offset + width)?
            }
            Op::Slice { axis, start, end } => {
                let extent = if axis == 0 { pr } else { pc };
                self.pad(g, axis, start, extent - end)?
            }
            Op::Pad { axis, before, .. } => {
                let width = if axis == 0 { pr } else { pc };
                self.slice(g, axis, before, before + width)?
            }
            Op::Broadcast(rows, cols) => {
                let mut acc = g;
                if pr == 1 && rows != 1 {
                    acc = self.sum_axis(acc, 0)?;
                }
                if pc == 1 && cols != 1 {
                    acc = self.sum_axis(acc, 1)?;
                }
                acc
            }
        };
        Ok(Some(out))
    }

    /// Builds the gradients and evaluates them.
    pub fn gradient_values(&mut self, output: NodeId, inputs: &[NodeId]) -> Result<Vec<Array>> {
        let grads = self.gradient(output, inputs)?;
        grads.into_iter().map(|g| self.eval_array(g)).collect()
    }
}

/// `∂output/∂input` where `output` itself contains a gradient subgraph.
///
/// Nothing special happens here: gradient nodes are ordinary nodes, so this
/// is one more reverse sweep over them.
pub fn second_order_check(graph: &mut ExprGraph, output: NodeId, input: NodeId) -> Result<Array> {
    let g = graph.gradient(output, &[input])?;
    graph.eval_array(g[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(g: &mut ExprGraph, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        g.constant(Array::matrix(rows, cols, data.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn componentwise_add() {
        let mut g = ExprGraph::new();
        let x = c(&mut g, 1, 2, &[1., 2.]);
        let y = c(&mut g, 1, 2, &[3., 4.]);
        let s = g.add(x, y).unwrap();
        assert_eq!(g.evaluate(s).unwrap().data(), &[4., 6.]);
    }

    #[test]
    fn matmul_shape_contract() {
        let mut g = ExprGraph::new();
        let a = g.input(2, 3);
        let b = g.input(3, 1);
        let m = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(m), (2, 1));
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = ExprGraph::new();
        let x = g.input(1, 2);
        let y = g.square(x).unwrap();
        assert_eq!(g.evaluate(y).unwrap_err(), AutodiffError::Unbound(0));
        g.bind(x, Array::row(vec![1.0, 3.0])).unwrap();
        assert_eq!(g.evaluate(y).unwrap().data(), &[1.0, 9.0]);
    }

    #[test]
    fn rebinding_invalidates_cache() {
        let mut g = ExprGraph::new();
        let x = g.input(1, 1);
        let y = g.square(x).unwrap();
        g.bind(x, Array::scalar(2.0)).unwrap();
        assert_eq!(g.eval_scalar(y).unwrap(), 4.0);
        g.bind(x, Array::scalar(3.0)).unwrap();
        assert_eq!(g.eval_scalar(y).unwrap(), 9.0);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = ExprGraph::new();
        let x = c(&mut g, 1, 1, &[-1.0]);
        let y = g.log(x).unwrap();
        assert!(matches!(
            g.evaluate(y),
            Err(AutodiffError::NonFinite { op: "log", .. })
        ));
    }

    #[test]
    fn square_derivative() {
        let mut g = ExprGraph::new();
        let x = c(&mut g, 1, 1, &[3.0]);
        let y = g.square(x).unwrap();
        let d = g.gradient_values(y, &[x]).unwrap();
        assert_eq!(d[0].item(), 6.0);
    }

    #[test]
    fn linear_map_gradient() {
        let mut g = ExprGraph::new();
        let w = c(&mut g, 1, 2, &[2., 5.]);
        let x = c(&mut g, 1, 2, &[1., 1.]);
        let p = g.mul(w, x).unwrap();
        let s = g.sum(p).unwrap();
        let d = g.gradient_values(s, &[x]).unwrap();
        assert_eq!(d[0].data(), &[2., 5.]);
    }

    #[test]
    fn non_ancestor_gradient_is_zero() {
        let mut g = ExprGraph::new();
        let x = c(&mut g, 1, 1, &[3.0]);
        let unrelated = c(&mut g, 2, 3, &[1.0; 6]);
        let y = g.square(x).unwrap();
        let d = g.gradient_values(y, &[unrelated]).unwrap();
        assert_eq!(d[0], Array::zeros(&[2, 3]));
    }

    #[test]
    fn gradient_requires_scalar_output() {
        let mut g = ExprGraph::new();
        let x = c(&mut g, 1, 2, &[1., 2.]);
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.gradient(y, &[x]),
            Err(AutodiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn cube_second_derivative() {
        // f = x³, f' = 3x², f'' = 6x = 12 at x = 2
        let mut g = ExprGraph::new();
        let x = c(&mut g, 1, 1, &[2.0]);
        let x2 = g.square(x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d1 = g.gradient(x3, &[x]).unwrap()[0];
        assert_eq!(g.eval_scalar(d1).unwrap(), 12.0);
        let d2 = second_order_check(&mut g, d1, x).unwrap();
        assert!((d2.item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn norm_of_gradient_composition() {
        // h(x) = ‖∇(½‖x‖²)‖² = ‖x‖², ∇h = 2x
        let mut g = ExprGraph::new();
        let x = c(&mut g, 1, 2, &[1., 2.]);
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grad = g.gradient(half, &[x]).unwrap()[0];
        let gsq = g.square(grad).unwrap();
        let h = g.sum(gsq).unwrap();
        let d = second_order_check(&mut g, h, x).unwrap();
        assert!(d.max_abs_diff(&Array::row(vec![2., 4.])) < 1e-12);
        assert!(g.nodes()[grad.index()].from_gradient);
    }

    #[test]
    fn logsumexp_matches_direct() {
        let mut g = ExprGraph::new();
        let x = c(&mut g, 2, 3, &[1., 2., 3., -1., 0., 4.]);
        let l = g.row_logsumexp(x).unwrap();
        let v = g.eval_array(l).unwrap();
        let direct = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((v.data()[0] - direct(&[1., 2., 3.])).abs() < 1e-12);
        assert!((v.data()[1] - direct(&[-1., 0., 4.])).abs() < 1e-12);
    }

    #[test]
    fn slice_concat_broadcast_adjoints() {
        let mut g = ExprGraph::new();
        let a = c(&mut g, 2, 2, &[1., 2., 3., 4.]);
        let b = c(&mut g, 2, 1, &[5., 6.]);
        let bias = c(&mut g, 1, 3, &[1., 2., 3.]);
        let cat = g.concat(&[a, b], 1).unwrap();
        let bb = g.broadcast(bias, 2, 3).unwrap();
        let m = g.mul(cat, bb).unwrap();
        let sl = g.slice(m, 1, 1, 3).unwrap();
        let s = g.sum(sl).unwrap();
        let d = g.gradient_values(s, &[a, b, bias]).unwrap();
        assert_eq!(d[0].data(), &[0., 2., 0., 2.]);
        assert_eq!(d[1].data(), &[3., 3.]);
        assert_eq!(d[2].data(), &[0., 6., 11.]);
    }
}
