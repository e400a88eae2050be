//! Eagerly evaluated computation graph with a taped reverse pass.
//!
//! Every operation is evaluated as soon as it is appended, so a [`Graph`] is
//! both the forward computation and the tape that [`Graph::backward`] walks in
//! reverse.

use crate::error::{NdiffError, Result};
use crate::linalg;
use crate::optim::ParamStore;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds.
///
/// `Add`, `Sub`, `Mul` and `Div` take equally shaped operands or broadcast a
/// one-element operand over the other. Row broadcasts take a matrix `[n, m]`
/// and a vector of length `m`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Scale(f64),
    Shift(f64),
    Cos,
    Sin,
    Exp,
    Log,
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
    Square,
    Sqrt,
    Clamp(f64, f64),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    LogSumExp(Option<usize>),
    BroadcastAddRow,
    BroadcastMulRow,
    Transpose,
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Diag,
    Cholesky,
    SolveTriangular { transposed: bool },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Matmul => "matmul",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Cos => "cos",
            Op::Sin => "sin",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAxis(_) => "mean_axis",
            Op::LogSumExp(_) => "logsumexp",
            Op::BroadcastAddRow => "broadcast_add_row",
            Op::BroadcastMulRow => "broadcast_mul_row",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Diag => "diag",
            Op::Cholesky => "cholesky",
            Op::SolveTriangular { .. } => "solve_triangular",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::Matmul
            | Op::BroadcastAddRow
            | Op::BroadcastMulRow
            | Op::SolveTriangular { .. } => Some(2),
            Op::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum Kind {
    Leaf { param: Option<String> },
    Op(Op),
}

#[derive(Debug)]
struct Node {
    kind: Kind,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of nodes in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Tensor>>,
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

    fn push(&mut self, kind: Kind, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Leaf { param: None }, Vec::new(), value, false)
    }

    /// A free leaf that receives an adjoint but is not tied to a store.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Leaf { param: None }, Vec::new(), value, true)
    }

    /// A leaf bound to the named entry of `store`; its adjoint is added to the
    /// entry's gradient by [`Graph::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        Ok(self.push(
            Kind::Leaf {
                param: Some(name.to_string()),
            },
            Vec::new(),
            value,
            true,
        ))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Adjoint of `id` after [`Graph::backward`]; zeros for non-ancestors.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match self.adjoints.get(id.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    /// Appends `op` applied to `inputs`, evaluating it immediately.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(NdiffError::Contract(format!(
                    "{} takes {} inputs, got {}",
                    op.name(),
                    n,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(NdiffError::Contract(format!("{} needs inputs", op.name())));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Kind::Op(op), inputs.to_vec(), value, requires_grad))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(NdiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Kind::Op(op) = &node.kind {
                if node.requires_grad {
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|id| self.nodes[id.0].requires_grad)
                        .collect();
                    let values: Vec<&Tensor> =
                        node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                    let grads = vjp(op, &values, &node.value, &g, &needs)?;
                    for (input, grad) in node.inputs.iter().zip(grads) {
                        if let Some(grad) = grad {
                            match &mut adj[input.0] {
                                Some(acc) => add_into(acc, &grad),
                                slot @ None => *slot = Some(grad),
                            }
                        }
                    }
                }
            }
            adj[idx] = Some(g);
        }
        self.adjoints = adj;
        Ok(())
    }

    /// Adds the adjoints of parameter leaves into `store`.
    pub fn accumulate_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Kind::Leaf { param: Some(name) } = &node.kind {
                if let Some(Some(g)) = self.adjoints.get(idx) {
                    store.accumulate(name, g)?;
                } else if !store.contains(name) {
                    return Err(NdiffError::UnknownParam(name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Shift(c), &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Scale(-1.0), &[a])
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Cos, &[a])
    }
    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sin, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.apply(Op::LeakyRelu(slope), &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp(lo, hi), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::SumAxis(axis), &[a])
    }
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::MeanAxis(axis), &[a])
    }
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSumExp(None), &[a])
    }
    pub fn logsumexp_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::LogSumExp(Some(axis)), &[a])
    }
    pub fn broadcast_add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Op::BroadcastAddRow, &[a, row])
    }
    pub fn broadcast_mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Op::BroadcastMulRow, &[a, row])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Diag, &[a])
    }
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Cholesky, &[a])
    }
    pub fn solve_triangular(&mut self, l: NodeId, b: NodeId, transposed: bool) -> Result<NodeId> {
        self.apply(Op::SolveTriangular { transposed }, &[l, b])
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    acc.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(a, b)| *a += b);
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

/// Shape of a binary elementwise result, allowing one-element broadcast.
fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(NdiffError::shapes(op, a.shape(), b.shape()))
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = binary_shape(op, a, b)?;
    let data = if a.len() == b.len() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(&shape, data)
}

/// Reduces a full-size gradient down to `shape` (sum if `shape` was broadcast).
fn unbroadcast(g: Vec<f64>, target: &Tensor) -> Tensor {
    if g.len() == target.len() {
        Tensor::new(target.shape(), g).expect("same length")
    } else {
        Tensor::full(target.shape(), g.iter().sum())
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(NdiffError::Contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn reduce_axis(x: &Tensor, axis: usize, op: &'static str, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(op, x.shape(), axis)?;
    let d = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut it = (0..len).map(|k| d[base + k * inner]);
            out.push(f(&mut it));
        }
    }
    Tensor::new(&without_axis(x.shape(), axis), out)
}

fn logsumexp_slice(it: &mut dyn Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = it.collect();
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(NdiffError::Contract(format!(
            "{op} needs a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let a = x[0];
    match op {
        Op::Add => binary("add", a, x[1], |p, q| p + q),
        Op::Sub => binary("sub", a, x[1], |p, q| p - q),
        Op::Mul => binary("mul", a, x[1], |p, q| p * q),
        Op::Div => binary("div", a, x[1], |p, q| p / q),
        Op::Matmul => a.matmul(x[1]),
        Op::Scale(c) => Ok(unary(a, |v| v * c)),
        Op::Shift(c) => Ok(unary(a, |v| v + c)),
        Op::Cos => Ok(unary(a, f64::cos)),
        Op::Sin => Ok(unary(a, f64::sin)),
        Op::Exp => Ok(unary(a, f64::exp)),
        Op::Log => {
            if let Some(v) = a.data().iter().find(|v| **v < 0.0) {
                return Err(NdiffError::Domain {
                    op: "log",
                    detail: format!("negative argument {v}"),
                });
            }
            Ok(unary(a, f64::ln))
        }
        Op::LeakyRelu(s) => Ok(unary(a, |v| if v >= 0.0 { v } else { s * v })),
        Op::Sigmoid => Ok(unary(a, sigmoid)),
        Op::Softplus => Ok(unary(a, softplus)),
        Op::Square => Ok(unary(a, |v| v * v)),
        Op::Sqrt => {
            if let Some(v) = a.data().iter().find(|v| **v < 0.0) {
                return Err(NdiffError::Domain {
                    op: "sqrt",
                    detail: format!("negative argument {v}"),
                });
            }
            Ok(unary(a, f64::sqrt))
        }
        Op::Clamp(lo, hi) => Ok(unary(a, |v| v.clamp(*lo, *hi))),
        Op::Sum => Ok(Tensor::scalar(a.sum())),
        Op::Mean => {
            if a.is_empty() {
                return Err(NdiffError::Contract("mean of empty tensor".into()));
            }
            Ok(Tensor::scalar(a.mean()))
        }
        Op::SumAxis(axis) => reduce_axis(a, *axis, "sum_axis", |it| it.sum()),
        Op::MeanAxis(axis) => {
            let len = *a.shape().get(*axis).unwrap_or(&0) as f64;
            reduce_axis(a, *axis, "mean_axis", |it| it.sum::<f64>() / len)
        }
        Op::LogSumExp(None) => Ok(Tensor::scalar(logsumexp_slice(&mut a.data().iter().copied()))),
        Op::LogSumExp(Some(axis)) => reduce_axis(a, *axis, "logsumexp", logsumexp_slice),
        Op::BroadcastAddRow | Op::BroadcastMulRow => {
            let row = x[1];
            let (n, m) = require_matrix(op.name(), a)?;
            if row.len() != m {
                return Err(NdiffError::shapes(op.name(), a.shape(), row.shape()));
            }
            let mut out = a.data().to_vec();
            let r = row.data();
            let add = matches!(op, Op::BroadcastAddRow);
            for i in 0..n {
                let dst = &mut out[i * m..(i + 1) * m];
                if add {
                    dst.iter_mut().zip(r).for_each(|(p, q)| *p += q);
                } else {
                    dst.iter_mut().zip(r).for_each(|(p, q)| *p *= q);
                }
            }
            Tensor::new(a.shape(), out)
        }
        Op::Transpose => a.transpose(),
        Op::Reshape(shape) => {
            if shape.iter().product::<usize>() != a.len() {
                return Err(NdiffError::shapes("reshape", a.shape(), shape));
            }
            a.reshape(shape)
        }
        Op::Concat(axis) => concat(x, *axis),
        Op::Slice { axis, start, end } => {
            let (outer, len, inner) = axis_split("slice", a.shape(), *axis)?;
            if start > end || *end > len {
                return Err(NdiffError::Contract(format!(
                    "slice {start}..{end} out of range for axis {axis} of {:?}",
                    a.shape()
                )));
            }
            let width = end - start;
            let mut out = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = width;
            Tensor::new(&shape, out)
        }
        Op::Diag => Ok(Tensor::from_vec(a.diag()?)),
        Op::Cholesky => linalg::cholesky(a),
        Op::SolveTriangular { transposed } => linalg::solve_triangular(a, x[1], *transposed),
    }
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    let (outer, _, inner) = axis_split("concat", first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(k, (x, y))| k == axis || x == y);
        if !same {
            return Err(NdiffError::shapes("concat", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

fn elementwise_grad(g: &Tensor, x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| gi * f(xi)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Broadcasts a reduced gradient back over `axis`.
fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, weight: impl Fn(usize, usize) -> f64) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                let flat = o * len * inner + k * inner + i;
                out[flat] = g.data()[o * inner + i] * weight(flat, o * inner + i);
            }
        }
    }
    Tensor::new(shape, out).expect("shape product")
}

/// Vector-Jacobian products for every input flagged in `needs`.
fn vjp(op: &Op, x: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let a = x[0];
    let one = |t: Tensor| vec![Some(t)];
    Ok(match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let b = x[1];
            let n = g.len();
            let av = |i: usize| if a.len() == 1 { a.data()[0] } else { a.data()[i] };
            let bv = |i: usize| if b.len() == 1 { b.data()[0] } else { b.data()[i] };
            let gd = g.data();
            let ga = needs[0].then(|| {
                let raw: Vec<f64> = match op {
                    Op::Add | Op::Sub => gd.to_vec(),
                    Op::Mul => (0..n).map(|i| gd[i] * bv(i)).collect(),
                    _ => (0..n).map(|i| gd[i] / bv(i)).collect(),
                };
                unbroadcast(raw, a)
            });
            let gb = needs[1].then(|| {
                let raw: Vec<f64> = match op {
                    Op::Add => gd.to_vec(),
                    Op::Sub => gd.iter().map(|v| -v).collect(),
                    Op::Mul => (0..n).map(|i| gd[i] * av(i)).collect(),
                    _ => (0..n).map(|i| -gd[i] * av(i) / (bv(i) * bv(i))).collect(),
                };
                unbroadcast(raw, b)
            });
            vec![ga, gb]
        }
        Op::Matmul => {
            let b = x[1];
            vec![
                needs[0].then(|| gemm(g, false, b, true)),
                needs[1].then(|| gemm(a, true, g, false)),
            ]
        }
        Op::Scale(c) => one(g.map(|v| v * c)),
        Op::Shift(_) => one(g.clone()),
        Op::Cos => one(elementwise_grad(g, a, |v| -v.sin())),
        Op::Sin => one(elementwise_grad(g, a, f64::cos)),
        Op::Exp => one(g.zip_map(out, |p, q| p * q)?),
        Op::Log => one(elementwise_grad(g, a, |v| 1.0 / v)),
        Op::LeakyRelu(s) => one(elementwise_grad(g, a, |v| if v >= 0.0 { 1.0 } else { *s })),
        Op::Sigmoid => one(g.zip_map(out, |p, q| p * q * (1.0 - q))?),
        Op::Softplus => one(elementwise_grad(g, a, sigmoid)),
        Op::Square => one(elementwise_grad(g, a, |v| 2.0 * v)),
        Op::Sqrt => one(g.zip_map(out, |p, q| p * 0.5 / q)?),
        Op::Clamp(lo, hi) => one(elementwise_grad(g, a, |v| {
            if v < *lo || v > *hi {
                0.0
            } else {
                1.0
            }
        })),
        Op::Sum => one(Tensor::full(a.shape(), g.data()[0])),
        Op::Mean => one(Tensor::full(a.shape(), g.data()[0] / a.len() as f64)),
        Op::SumAxis(axis) => one(expand_axis(g, a.shape(), *axis, |_, _| 1.0)),
        Op::MeanAxis(axis) => {
            let len = a.shape()[*axis] as f64;
            one(expand_axis(g, a.shape(), *axis, |_, _| 1.0 / len))
        }
        Op::LogSumExp(None) => {
            let m = out.data()[0];
            let gv = g.data()[0];
            one(a.map(|v| gv * (v - m).exp()))
        }
        Op::LogSumExp(Some(axis)) => {
            let ad = a.data();
            let od = out.data();
            one(expand_axis(g, a.shape(), *axis, |flat, red| (ad[flat] - od[red]).exp()))
        }
        Op::BroadcastAddRow | Op::BroadcastMulRow => {
            let row = x[1];
            let (n, m) = (a.shape()[0], a.shape()[1]);
            let gd = g.data();
            let add = matches!(op, Op::BroadcastAddRow);
            let ga = needs[0].then(|| {
                if add {
                    g.clone()
                } else {
                    let mut d = gd.to_vec();
                    for i in 0..n {
                        d[i * m..(i + 1) * m]
                            .iter_mut()
                            .zip(row.data())
                            .for_each(|(p, q)| *p *= q);
                    }
                    Tensor::new(a.shape(), d).expect("shape")
                }
            });
            let gr = needs[1].then(|| {
                let mut acc = vec![0.0; m];
                for i in 0..n {
                    let gi = &gd[i * m..(i + 1) * m];
                    if add {
                        acc.iter_mut().zip(gi).for_each(|(p, q)| *p += q);
                    } else {
                        let ai = &a.data()[i * m..(i + 1) * m];
                        acc.iter_mut()
                            .zip(gi.iter().zip(ai))
                            .for_each(|(p, (q, r))| *p += q * r);
                    }
                }
                Tensor::new(row.shape(), acc).expect("shape")
            });
            vec![ga, gr]
        }
        Op::Transpose => one(g.transpose()?),
        Op::Reshape(_) => one(g.reshape(a.shape())?),
        Op::Concat(axis) => {
            let (outer, total, inner) = axis_split("concat", out.shape(), *axis)?;
            let mut grads = Vec::with_capacity(x.len());
            let mut offset = 0;
            for (p, need) in x.iter().zip(needs) {
                let width = p.shape()[*axis];
                if *need {
                    let mut d = Vec::with_capacity(p.len());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&g.data()[base..base + width * inner]);
                    }
                    grads.push(Some(Tensor::new(p.shape(), d)?));
                } else {
                    grads.push(None);
                }
                offset += width;
            }
            grads
        }
        Op::Slice { axis, start, end } => {
            let (outer, len, inner) = axis_split("slice", a.shape(), *axis)?;
            let width = end - start;
            let mut d = vec![0.0; a.len()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                d[dst..dst + width * inner]
                    .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
            }
            one(Tensor::new(a.shape(), d)?)
        }
        Op::Diag => {
            let n = a.shape()[0];
            let mut t = Tensor::zeros(a.shape());
            for i in 0..n {
                t.data_mut()[i * n + i] = g.data()[i];
            }
            one(t)
        }
        Op::Cholesky => one(cholesky_vjp(out, g)?),
        Op::SolveTriangular { transposed } => {
            let l = a;
            let b_grad = linalg::solve_triangular(l, g, !transposed)?;
            let gl = if needs[0] {
                let n = l.shape()[0];
                let as_cols = |t: &Tensor| -> Tensor {
                    if t.rank() == 1 {
                        Tensor::new(&[n, 1], t.data().to_vec()).expect("column")
                    } else {
                        t.clone()
                    }
                };
                let (xb, bb) = (as_cols(out), as_cols(&b_grad));
                // non-transposed: L̄ = -tril(B̄ Xᵀ); transposed: L̄ = -tril(X B̄ᵀ)
                let full = if *transposed {
                    gemm(&xb, false, &bb, true)
                } else {
                    gemm(&bb, false, &xb, true)
                };
                let mut t = full.map(|v| -v);
                tril_in_place(&mut t);
                Some(t)
            } else {
                None
            };
            vec![gl, needs[1].then_some(b_grad)]
        }
    })
}

fn tril_in_place(t: &mut Tensor) {
    let n = t.shape()[0];
    let d = t.data_mut();
    for i in 0..n {
        for j in i + 1..n {
            d[i * n + j] = 0.0;
        }
    }
}

/// Adjoint of `A` for `L = chol(A)` when the forward pass reads only the
/// lower triangle of `A`.
fn cholesky_vjp(l: &Tensor, lbar: &Tensor) -> Result<Tensor> {
    let n = l.shape()[0];
    let mut lbar = lbar.clone();
    tril_in_place(&mut lbar);
    // P = Φ(Lᵀ L̄): lower triangle with halved diagonal
    let mut p = gemm(l, true, &lbar, false);
    tril_in_place(&mut p);
    for i in 0..n {
        p.data_mut()[i * n + i] *= 0.5;
    }
    // S = L⁻ᵀ P L⁻¹
    let left = linalg::solve_triangular(l, &p, true)?;
    let s = linalg::solve_triangular(l, &left.transpose()?, true)?.transpose()?;
    let mut out = Tensor::zeros(&[n, n]);
    let sd = s.data();
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..i {
            od[i * n + j] = sd[i * n + j] + sd[j * n + i];
        }
        od[i * n + i] = sd[i * n + i];
    }
    Ok(out)
}
