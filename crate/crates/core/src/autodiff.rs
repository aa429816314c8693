//! Eager reverse-mode automatic differentiation on a tape.
//!
//! Every operation is evaluated the moment it is recorded. A [`Graph`] is an
//! append-only list of nodes, so insertion order is already a topological
//! order and [`Graph::backward`] simply walks the tape in reverse.
//!
//! Broadcasting is limited to adding a `[m]` (or `[1, m]`) bias to every row
//! of an `[n, m]` matrix. Everything else must match exactly.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to every argument of [`Op::Log`].
pub const LOG_EPS: f64 = 1e-7;

/// Floor on the row norm used by [`Op::L2Normalize`]; a zero row maps to zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// Parameter or constant input.
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    Exp,
    /// Natural log of `max(x, LOG_EPS)`.
    Log,
    Sigmoid,
    /// Mean of all entries, shape `[1]`.
    Mean,
    /// Sum of all entries, shape `[1]`.
    Sum,
    /// Per-row sum, `[n, m] -> [n, 1]`.
    RowSum,
    LogSoftmax,
    L2Normalize,
    ConcatRows,
    Transpose,
    Clamp { lo: f64, hi: f64 },
    /// Identity forward, gradient multiplied by `-scale` on the way back.
    GradReverse(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::RowSum => "row_sum",
            Op::LogSoftmax => "log_softmax",
            Op::L2Normalize => "l2_normalize",
            Op::ConcatRows => "concat_rows",
            Op::Transpose => "transpose",
            Op::Clamp { .. } => "clamp",
            Op::GradReverse(_) => "grad_reverse",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Single-use tape. Not shared across threads.
#[derive(Clone, Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

impl Default for Graph {
    fn default() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }
}

/// Gradients of one scalar loss with respect to every node it depends on.
///
/// Nodes the loss does not depend on are absent rather than zero-filled.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

fn is_row_bias(a: &[usize], b: &[usize]) -> bool {
    a.len() == 2 && ((b.len() == 1 && b[0] == a[1]) || (b.len() == 2 && b[0] == 1 && b[1] == a[1]))
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Process-unique identity, used to catch mixing nodes across tapes.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id.0].op
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// A leaf holding a copy of `id`'s current value; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.value(id).clone();
        self.leaf(value)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records `op` applied to `inputs` and evaluates it eagerly.
    pub fn forward(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!(
                "{}: unknown input node {}",
                op.name(),
                bad.0
            )));
        }
        let arity_ok = match op {
            Op::Leaf => false,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => inputs.len() == 2,
            Op::ConcatRows => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::InvalidArgument(format!(
                "{} does not take {} inputs",
                op.name(),
                inputs.len()
            )));
        }
        let value = self.eval(op, inputs)?;
        Ok(self.push(op, inputs.to_vec(), value))
    }

    fn eval(&self, op: Op, inputs: &[NodeId]) -> Result<Tensor> {
        let x = self.value(inputs[0]);
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul => x.matmul(self.value(inputs[1]))?,
            Op::Add => {
                let y = self.value(inputs[1]);
                if x.shape() == y.shape() {
                    x.zip_map(y, |a, b| a + b)
                } else if is_row_bias(x.shape(), y.shape()) {
                    let c = x.cols();
                    let mut out = x.clone();
                    for (k, v) in out.values_mut().iter_mut().enumerate() {
                        *v += y.values()[k % c];
                    }
                    out
                } else {
                    return Err(Error::shape("add", &[x.shape(), y.shape()]));
                }
            }
            Op::Sub | Op::Mul => {
                let y = self.value(inputs[1]);
                if x.shape() != y.shape() {
                    return Err(Error::shape(op.name(), &[x.shape(), y.shape()]));
                }
                if op == Op::Sub {
                    x.zip_map(y, |a, b| a - b)
                } else {
                    x.zip_map(y, |a, b| a * b)
                }
            }
            Op::ScalarMul(s) => x.map(|v| s * v),
            Op::Relu => x.map(|v| v.max(0.0)),
            Op::Exp => x.map(f64::exp),
            Op::Log => x.map(|v| v.max(LOG_EPS).ln()),
            Op::Sigmoid => x.map(sigmoid),
            Op::Mean => Tensor::scalar(x.mean()),
            Op::Sum => Tensor::scalar(x.values().iter().sum()),
            Op::RowSum => {
                if !x.is_matrix() {
                    return Err(Error::shape("row_sum", &[x.shape()]));
                }
                let sums = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
                Tensor::matrix(x.rows(), 1, sums)
            }
            Op::LogSoftmax => {
                if !x.is_matrix() {
                    return Err(Error::shape("log_softmax", &[x.shape()]));
                }
                log_softmax_rows(x)
            }
            Op::L2Normalize => {
                if !x.is_matrix() {
                    return Err(Error::shape("l2_normalize", &[x.shape()]));
                }
                let norms = row_norms(x);
                let c = x.cols();
                let mut out = x.clone();
                for (k, v) in out.values_mut().iter_mut().enumerate() {
                    *v /= norms[k / c].max(NORM_EPS);
                }
                out
            }
            Op::ConcatRows => {
                let cols = x.cols();
                let mut values = Vec::new();
                let mut rows = 0;
                for &id in inputs {
                    let t = self.value(id);
                    if !t.is_matrix() || t.cols() != cols {
                        let shapes: Vec<&[usize]> =
                            inputs.iter().map(|&i| self.value(i).shape()).collect();
                        return Err(Error::shape("concat_rows", &shapes));
                    }
                    rows += t.rows();
                    values.extend_from_slice(t.values());
                }
                Tensor::matrix(rows, cols, values)
            }
            Op::Transpose => {
                if !x.is_matrix() {
                    return Err(Error::shape("transpose", &[x.shape()]));
                }
                x.transpose()
            }
            Op::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
                }
                x.map(|v| v.clamp(lo, hi))
            }
            Op::GradReverse(_) => x.clone(),
        };
        Ok(out)
    }

    /// Reverse accumulation from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (slot, contrib) in self.input_grads(node, &g) {
                let target = node.inputs[slot].0;
                match &mut grads[target] {
                    Some(acc) => acc.add_assign_scaled(&contrib, 1.0),
                    empty => *empty = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (NodeId(i), g)))
            .collect();
        Ok(GradientMap { grads })
    }

    /// Gradient contributions of `node` to each of its inputs, given the
    /// gradient `g` flowing into its output.
    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
        let x_id = match node.inputs.first() {
            Some(&id) => id,
            None => return Vec::new(),
        };
        let x = self.value(x_id);
        let y = &node.value;
        match node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let b = self.value(node.inputs[1]);
                let ga = g.matmul(&b.transpose()).expect("matmul grad");
                let gb = x.transpose().matmul(g).expect("matmul grad");
                vec![(0, ga), (1, gb)]
            }
            Op::Add => {
                let b = self.value(node.inputs[1]);
                let gb = if b.shape() == g.shape() {
                    g.clone()
                } else {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for (k, v) in g.values().iter().enumerate() {
                        acc[k % c] += v;
                    }
                    Tensor::new(b.shape().to_vec(), acc).expect("bias shape")
                };
                vec![(0, g.clone()), (1, gb)]
            }
            Op::Sub => vec![(0, g.clone()), (1, g.map(|v| -v))],
            Op::Mul => {
                let b = self.value(node.inputs[1]);
                vec![(0, g.zip_map(b, |gv, bv| gv * bv)), (1, g.zip_map(x, |gv, av| gv * av))]
            }
            Op::ScalarMul(s) => vec![(0, g.map(|v| s * v))],
            Op::Relu => vec![(0, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Exp => vec![(0, g.zip_map(y, |gv, yv| gv * yv))],
            Op::Log => vec![(
                0,
                g.zip_map(x, |gv, xv| if xv > LOG_EPS { gv / xv } else { 0.0 }),
            )],
            Op::Sigmoid => vec![(0, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))],
            Op::Mean => {
                let s = g.item() / x.len() as f64;
                vec![(0, Tensor::full(x.shape(), s))]
            }
            Op::Sum => vec![(0, Tensor::full(x.shape(), g.item()))],
            Op::RowSum => {
                let c = x.cols();
                let mut out = Tensor::zeros(x.shape());
                for (k, v) in out.values_mut().iter_mut().enumerate() {
                    *v = g.values()[k / c];
                }
                vec![(0, out)]
            }
            Op::LogSoftmax => {
                // dx = g - softmax * rowsum(g)
                let c = x.cols();
                let mut out = g.clone();
                for i in 0..x.rows() {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..c {
                        out.values_mut()[i * c + j] -= y.get(i, j).exp() * gs;
                    }
                }
                vec![(0, out)]
            }
            Op::L2Normalize => {
                // dx = (g - y (y . g)) / max(|x|, eps)
                let norms = row_norms(x);
                let c = x.cols();
                let mut out = g.clone();
                for i in 0..x.rows() {
                    let n = norms[i];
                    let vals = out.values_mut();
                    if n <= NORM_EPS {
                        for j in 0..c {
                            vals[i * c + j] = g.get(i, j) / NORM_EPS;
                        }
                        continue;
                    }
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        vals[i * c + j] = (g.get(i, j) - y.get(i, j) * dot) / n;
                    }
                }
                vec![(0, out)]
            }
            Op::ConcatRows => {
                let c = g.cols();
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(slot, &id)| {
                        let r = self.value(id).rows();
                        let part = g.values()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        (slot, Tensor::matrix(r, c, part))
                    })
                    .collect()
            }
            Op::Transpose => vec![(0, g.transpose())],
            Op::Clamp { lo, hi } => vec![(
                0,
                g.zip_map(x, |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
            )],
            Op::GradReverse(scale) => vec![(0, g.map(|v| -scale * v))],
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.forward(Op::ScalarMul(s), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Relu, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Log, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Sigmoid, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Mean, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Sum, &[a])
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::RowSum, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::LogSoftmax, &[a])
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::L2Normalize, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.forward(Op::ConcatRows, parts)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Transpose, &[a])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.forward(Op::Clamp { lo, hi }, &[a])
    }

    pub fn grad_reverse(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        self.forward(Op::GradReverse(scale), &[a])
    }
}
