//! Append-only computation tape.
//!
//! Every op evaluates eagerly and appends a node holding its output. Node
//! ids are assigned in append order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! Vector-Jacobian products are themselves expressed with tape ops. With
//! `create_graph` set, the gradients returned by `backward` are ordinary
//! nodes and can be differentiated again; without it they are recorded as
//! constants.

use std::cell::{Cell, RefCell};
use std::ops::Range;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_kernel, Tensor};

/// Marks a padded position in a gather index map.
pub const PAD: u32 = u32::MAX;

const NORM_EPS: f64 = 1e-24;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Log1p(Var),
    Sqrt(Var),
    Abs(Var),
    RowSoftmax(Var),
    L2NormalizeRows(Var),
    Broadcast(Var),
    ReduceTo(Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<u32>>),
    ScatterAdd(Var, Arc<Vec<u32>>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Op kinds addressable through [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Log,
    RowSoftmax,
    L2NormalizeRows,
    Sum,
    Mean,
    Transpose,
    Slice { rows: Range<usize>, cols: Range<usize> },
    Concat { axis: usize },
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
}

struct NoGradGuard<'a> {
    graph: &'a Graph,
    prev: bool,
}

impl Drop for NoGradGuard<'_> {
    fn drop(&mut self) {
        self.graph.no_grad.set(self.prev);
    }
}

impl Graph {
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

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, !self.no_grad.get())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn no_grad_guard(&self) -> NoGradGuard<'_> {
        let prev = self.no_grad.replace(true);
        NoGradGuard { graph: self, prev }
    }

    fn push_unchecked(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = !self.no_grad.get() && inputs.iter().any(|&v| self.requires_grad(v));
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let [m, k] = va.shape();
        let [k2, n] = vb.shape();
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape()));
        }
        let out = Tensor::new([m, n], matmul_kernel(va.data(), vb.data(), m, k, n))?;
        self.push("matmul", Op::MatMul(a, b), out, &[a, b])
    }

    fn binary(&self, name: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok((a, b))
        } else if broadcastable(sb, sa) {
            Ok((a, self.broadcast_to(b, sa)?))
        } else if broadcastable(sa, sb) {
            Ok((self.broadcast_to(a, sb)?, b))
        } else {
            shape_err(name, format!("{sa:?} vs {sb:?}"))
        }
    }

    fn elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (a, b) = self.binary(name, a, b)?;
        let out = self.value(a).zip_map(&self.value(b), f)?;
        self.push(name, op(a, b), out, &[a, b])
    }

    /// Elementwise sum; a row vector, column vector or scalar operand is
    /// broadcast.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(|x| x * c));
        self.push("scale", Op::Scale(a, c), out, &[a])
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(|x| x + c));
        self.push("add_scalar", Op::AddScalar(a), out, &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(|x| x.max(0.0)));
        self.push("relu", Op::Relu(a), out, &[a])
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::exp));
        self.push("exp", Op::Exp(a), out, &[a])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::ln));
        self.push("log", Op::Log(a), out, &[a])
    }

    /// `ln(1 + x)`, accurate for small `x`.
    pub fn log1p(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::ln_1p));
        self.push("log1p", Op::Log1p(a), out, &[a])
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::sqrt));
        self.push("sqrt", Op::Sqrt(a), out, &[a])
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::abs));
        self.push("abs", Op::Abs(a), out, &[a])
    }

    /// Softmax along each row, computed with the row max subtracted.
    pub fn row_softmax(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        self.push("row_softmax", Op::RowSoftmax(a), Tensor::new([r, c], out)?, &[a])
    }

    /// Softmax along each column.
    pub fn col_softmax(&self, a: Var) -> Result<Var> {
        let t = self.transpose(a)?;
        let s = self.row_softmax(t)?;
        self.transpose(s)
    }

    /// Divides each row by its l2 norm. A zero row stays zero.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            for (d, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *d = x / norm;
            }
        }
        self.push(
            "l2_normalize_rows",
            Op::L2NormalizeRows(a),
            Tensor::new([r, c], out)?,
            &[a],
        )
    }

    /// Expands a `1×c`, `r×1` or `1×1` tensor to `shape`.
    pub fn broadcast_to(&self, a: Var, shape: [usize; 2]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s == shape {
            return Ok(a);
        }
        if !broadcastable(s, shape) {
            return shape_err("broadcast", format!("{s:?} -> {shape:?}"));
        }
        let out = Tensor::from_fn(shape, |i, j| {
            t.get(if s[0] == 1 { 0 } else { i }, if s[1] == 1 { 0 } else { j })
        })?;
        self.push("broadcast", Op::Broadcast(a), out, &[a])
    }

    /// Sums over the axes along which `shape` has extent 1; the adjoint of
    /// [`Graph::broadcast_to`].
    pub fn reduce_to(&self, a: Var, shape: [usize; 2]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s == shape {
            return Ok(a);
        }
        if !broadcastable(shape, s) {
            return shape_err("reduce", format!("{s:?} -> {shape:?}"));
        }
        let mut out = vec![0.0; shape[0] * shape[1]];
        for i in 0..s[0] {
            let oi = if shape[0] == 1 { 0 } else { i };
            for j in 0..s[1] {
                let oj = if shape[1] == 1 { 0 } else { j };
                out[oi * shape[1] + oj] += t.get(i, j);
            }
        }
        self.push("reduce", Op::ReduceTo(a), Tensor::new(shape, out)?, &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.reduce_to(a, [1, 1])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_value(a, Tensor::len);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums as an `r×1` column.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let [r, _] = self.shape(a);
        self.reduce_to(a, [r, 1])
    }

    /// Per-column sums as a `1×c` row.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let [_, c] = self.shape(a);
        self.reduce_to(a, [1, c])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, Tensor::transpose);
        self.push("transpose", Op::Transpose(a), out, &[a])
    }

    pub fn reshape(&self, a: Var, shape: [usize; 2]) -> Result<Var> {
        let out = self.with_value(a, |t| t.reshape(shape))?;
        self.push("reshape", Op::Reshape(a), out, &[a])
    }

    /// `out[i] = a[index[i]]` over flat row-major positions; [`PAD`] yields 0.
    pub fn gather(&self, a: Var, index: Arc<Vec<u32>>, shape: [usize; 2]) -> Result<Var> {
        let t = self.value(a);
        if index.len() != shape[0] * shape[1] {
            return shape_err("gather", format!("{} indices for {shape:?}", index.len()));
        }
        let src = t.data();
        let mut out = Vec::with_capacity(index.len());
        for &ix in index.iter() {
            if ix == PAD {
                out.push(0.0);
            } else {
                match src.get(ix as usize) {
                    Some(&x) => out.push(x),
                    None => return shape_err("gather", format!("index {ix} out of {}", src.len())),
                }
            }
        }
        self.push("gather", Op::Gather(a, index), Tensor::new(shape, out)?, &[a])
    }

    /// `out[index[i]] += a[i]`; the adjoint of [`Graph::gather`].
    pub fn scatter_add(&self, a: Var, index: Arc<Vec<u32>>, shape: [usize; 2]) -> Result<Var> {
        let t = self.value(a);
        if index.len() != t.len() {
            return shape_err("scatter_add", format!("{} indices for {} values", index.len(), t.len()));
        }
        let mut out = vec![0.0; shape[0] * shape[1]];
        for (&ix, &x) in index.iter().zip(t.data()) {
            if ix == PAD {
                continue;
            }
            match out.get_mut(ix as usize) {
                Some(o) => *o += x,
                None => return shape_err("scatter_add", format!("index {ix} out of {shape:?}")),
            }
        }
        self.push("scatter_add", Op::ScatterAdd(a, index), Tensor::new(shape, out)?, &[a])
    }

    pub fn slice(&self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let [r, c] = self.shape(a);
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > r || cols.end > c {
            return shape_err("slice", format!("[{rows:?}, {cols:?}] of {:?}", [r, c]));
        }
        let mut index = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            for j in cols.clone() {
                index.push((i * c + j) as u32);
            }
        }
        self.gather(a, Arc::new(index), [rows.len(), cols.len()])
    }

    /// Rows `rows` (in the given order, repeats allowed) of `a`.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return shape_err("select_rows", format!("{rows:?} of {r} rows"));
        }
        let index = rows
            .iter()
            .flat_map(|&i| (0..c).map(move |j| (i * c + j) as u32))
            .collect();
        self.gather(a, Arc::new(index), [rows.len(), c])
    }

    /// Submatrix with the given row and column index lists.
    pub fn select(&self, a: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if rows.is_empty() || cols.is_empty() || rows.iter().any(|&i| i >= r) || cols.iter().any(|&j| j >= c) {
            return shape_err("select", "index out of range or empty selection");
        }
        let index = rows
            .iter()
            .flat_map(|&i| cols.iter().map(move |&j| (i * c + j) as u32))
            .collect();
        self.gather(a, Arc::new(index), [rows.len(), cols.len()])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Contract("concat needs at least one input and axis 0 or 1".into()));
        }
        let shapes: Vec<[usize; 2]> = parts.iter().map(|&p| self.shape(p)).collect();
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return shape_err("concat", format!("{shapes:?} along axis {axis}"));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let out_shape = if axis == 0 {
            [total, shapes[0][1]]
        } else {
            [shapes[0][0], total]
        };
        let mut offset = 0;
        let mut acc: Option<Var> = None;
        for (&p, s) in parts.iter().zip(&shapes) {
            let mut index = Vec::with_capacity(s[0] * s[1]);
            for i in 0..s[0] {
                for j in 0..s[1] {
                    let (oi, oj) = if axis == 0 { (i + offset, j) } else { (i, j + offset) };
                    index.push((oi * out_shape[1] + oj) as u32);
                }
            }
            offset += s[axis];
            let placed = self.scatter_add(p, Arc::new(index), out_shape)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => self.add(a, placed)?,
            });
        }
        Ok(acc.expect("non-empty"))
    }

    /// Dispatch by op kind.
    pub fn apply(&self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], *c)),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::RowSoftmax => arity(1).and_then(|_| self.row_softmax(inputs[0])),
            OpKind::L2NormalizeRows => arity(1).and_then(|_| self.l2_normalize_rows(inputs[0])),
            OpKind::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Slice { rows, cols } => {
                arity(1).and_then(|_| self.slice(inputs[0], rows.clone(), cols.clone()))
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
        }
    }

    // ----------------------------------------------------------- backward

    /// Gradients of the scalar `root` with respect to each of `wrt`.
    ///
    /// A `wrt` node that `root` does not depend on gets a zero gradient.
    /// With `create_graph`, the returned gradients are differentiable nodes.
    pub fn backward(&self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.shape(root) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let _guard = (!create_graph).then(|| self.no_grad_guard());
        let n = root.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            for (input, contrib) in self.vjp(Var(id), &op, g)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
            // Free the slot; intermediate grads are no longer needed.
            if !wrt.contains(&Var(id)) {
                grads[id] = None;
            }
        }
        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.shape(w))?)),
            })
            .collect()
    }

    /// First-order gradients as plain tensors.
    pub fn grads(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        Ok(self
            .backward(root, wrt, false)?
            .into_iter()
            .map(|g| self.value(g))
            .collect())
    }

    fn vjp(&self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let rg = |v: Var| self.requires_grad(v);
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if rg(b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    res.push((a, g));
                }
                if rg(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    res.push((a, g));
                }
                if rg(b) {
                    res.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    res.push((a, self.mul(g, b)?));
                }
                if rg(b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if rg(a) {
                    res.push((a, self.div(g, b)?));
                }
                if rg(b) {
                    let gy = self.mul(g, out)?;
                    let q = self.div(gy, b)?;
                    res.push((b, self.neg(q)?));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Op::AddScalar(a) => res.push((a, g)),
            Op::Relu(a) => {
                let mask = self.with_value(a, |t| t.map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                let m = self.constant(mask);
                res.push((a, self.mul(g, m)?));
            }
            Op::Abs(a) => {
                let sign = self.with_value(a, |t| t.map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }));
                let s = self.constant(sign);
                res.push((a, self.mul(g, s)?));
            }
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Log(a) => res.push((a, self.div(g, a)?)),
            Op::Log1p(a) => {
                let denom = self.add_scalar(a, 1.0)?;
                res.push((a, self.div(g, denom)?));
            }
            Op::Sqrt(a) => {
                let q = self.div(g, out)?;
                res.push((a, self.scale(q, 0.5)?));
            }
            Op::RowSoftmax(a) => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let gy = self.mul(g, out)?;
                let s = self.sum_rows(gy)?;
                let centered = self.sub(g, s)?;
                res.push((a, self.mul(out, centered)?));
            }
            Op::L2NormalizeRows(a) => {
                // (g − y · rowsum(g ⊙ y)) / ‖x‖
                let gy = self.mul(g, out)?;
                let s = self.sum_rows(gy)?;
                let proj = self.mul(out, s)?;
                let centered = self.sub(g, proj)?;
                let sq = self.mul(a, a)?;
                let ss = self.sum_rows(sq)?;
                let ss = self.add_scalar(ss, NORM_EPS)?;
                let norm = self.sqrt(ss)?;
                res.push((a, self.div(centered, norm)?));
            }
            Op::Broadcast(a) => res.push((a, self.reduce_to(g, self.shape(a))?)),
            Op::ReduceTo(a) => res.push((a, self.broadcast_to(g, self.shape(a))?)),
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::Reshape(a) => res.push((a, self.reshape(g, self.shape(a))?)),
            Op::Gather(a, ref index) => {
                res.push((a, self.scatter_add(g, Arc::clone(index), self.shape(a))?))
            }
            Op::ScatterAdd(a, ref index) => {
                res.push((a, self.gather(g, Arc::clone(index), self.shape(a))?))
            }
        }
        Ok(res)
    }

    /// One in-graph gradient-descent step, `θ − lr·g` for every parameter.
    ///
    /// `lr` is a `1×1` node, so downstream values stay differentiable with
    /// respect to it as well as to the incoming parameters.
    pub fn sgd_step(&self, params: &[Var], grads: &[Var], lr: Var) -> Result<Vec<Var>> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.shape(lr) != [1, 1] {
            return shape_err("sgd_step", "learning rate must be 1x1");
        }
        params
            .iter()
            .zip(grads)
            .map(|(&p, &g)| {
                if self.shape(p) != self.shape(g) {
                    return shape_err(
                        "sgd_step",
                        format!("param {:?} vs grad {:?}", self.shape(p), self.shape(g)),
                    );
                }
                let step = self.mul(g, lr)?;
                self.sub(p, step)
            })
            .collect()
    }
}

fn broadcastable(from: [usize; 2], to: [usize; 2]) -> bool {
    (from[0] == to[0] || from[0] == 1) && (from[1] == to[1] || from[1] == 1)
}
