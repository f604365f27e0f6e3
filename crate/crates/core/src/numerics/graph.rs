//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are evaluated eagerly as they are added; [`Graph::forward`] replays
//! the whole graph after rebinding leaf values, which is what the finite
//! difference checks rely on.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use super::tensor::{dot, matmul_nt, matmul_tn, Tensor};
use super::NORM_EPS;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Optimised parameter; receives gradients.
    Trainable,
    /// Pretrained weight; never receives gradients.
    Frozen,
    /// Data or constant mask.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf(LeafKind),
    MatMul,
    /// Elementwise; the right operand may be a `[1, n]` row or `[1, 1]`
    /// scalar broadcast over the left operand.
    Add,
    Mul,
    Scale(f64),
    Concat(Axis),
    Slice { rows: Range<usize>, cols: Range<usize> },
    Transpose,
    Relu,
    Gelu,
    /// Row-wise standardisation without affine parameters.
    LayerNorm { eps: f64 },
    /// Row-wise, max-subtracted.
    Softmax,
    /// Row-wise, norm floored at 1e-12.
    L2Normalize,
    Exp,
    Log,
    Mean,
    Sum,
    Abs,
    Detach,
    /// Replaces entry `(i, targets[i])` of a cosine matrix by
    /// `cos(θ + margin)`, falling back to `cos θ − margin·sin(margin)` once
    /// `θ + margin` passes π so the logit stays monotone in θ.
    AngularMargin { margin: f64, targets: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax => "softmax",
            Op::L2Normalize => "l2_normalize",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Abs => "abs",
            Op::Detach => "detach",
            Op::AngularMargin { .. } => "angular_margin",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by trainable leaf.
///
/// Every trainable leaf has an entry; leaves the loss does not reach hold an
/// all-zero tensor.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// True when the gradient of `id` is absent or exactly zero.
    pub fn is_zero(&self, id: NodeId) -> bool {
        self.grads
            .get(&id)
            .is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    pub fn trainable_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&id| self.leaf_kind(id) == Some(LeafKind::Trainable))
            .collect()
    }

    fn leaf(&mut self, kind: LeafKind, value: Arc<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            inputs: Vec::new(),
            value,
            requires_grad: kind == LeafKind::Trainable,
        });
        id
    }

    pub fn trainable(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Trainable, Arc::new(value))
    }

    pub fn frozen(&mut self, value: Arc<Tensor>) -> NodeId {
        self.leaf(LeafKind::Frozen, value)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Input, Arc::new(value))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &*self.nodes[i.0].value).collect();
            eval(&op, &vals)?
        };
        let requires_grad = !matches!(op, Op::Detach)
            && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat(axis), parts.to_vec())
    }

    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        self.push(Op::Slice { rows, cols }, vec![a])
    }

    pub fn slice_rows(&mut self, a: NodeId, rows: Range<usize>) -> Result<NodeId> {
        let c = self.value(a).cols();
        self.slice(a, rows, 0..c)
    }

    pub fn slice_cols(&mut self, a: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let r = self.value(a).rows();
        self.slice(a, 0..r, cols)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu, vec![a])
    }

    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm { eps: 1e-5 }, vec![a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![a])
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, vec![a])
    }

    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Detach, vec![a])
    }

    pub fn angular_margin(&mut self, cos: NodeId, targets: Vec<usize>, margin: f64) -> Result<NodeId> {
        self.push(Op::AngularMargin { margin, targets }, vec![cos])
    }

    /// Pairwise cosine similarity between the rows of `a` and `b`.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// `x · w + b` with `b` a `[1, out]` row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Rebinds leaf values, then recomputes every derived node in order.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor)]) -> Result<()> {
        for (id, t) in bindings {
            let node = &mut self.nodes[id.0];
            if !matches!(node.op, Op::Leaf(_)) {
                return Err(Error::invalid(format!("node {} is not a leaf", id.0)));
            }
            if node.value.shape() != t.shape() {
                return Err(Error::shape(
                    "bind",
                    format!("leaf {} is {:?}, binding is {:?}", id.0, node.value.shape(), t.shape()),
                ));
            }
            node.value = Arc::new(t.clone());
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let vals: Vec<&Tensor> =
                    node.inputs.iter().map(|j| &*self.nodes[j.0].value).collect();
                eval(&node.op, &vals)?
            };
            self.nodes[i].value = Arc::new(value);
        }
        Ok(())
    }

    /// Reverse-mode pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Slice { rows, cols } = &node.op {
                // scatter into the parent accumulator; a dense zero tensor per
                // slice dominates runtime when a big matrix is sliced many times
                let p = node.inputs[0].0;
                if !self.nodes[p].requires_grad {
                    continue;
                }
                let pv = &self.nodes[p].value;
                let acc = grads[p].get_or_insert_with(|| Tensor::zeros(pv.rows(), pv.cols()));
                for (k, r) in rows.clone().enumerate() {
                    for (a, v) in acc.row_slice_mut(r)[cols.clone()].iter_mut().zip(g.row_slice(k)) {
                        *a += v;
                    }
                }
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|j| &*self.nodes[j.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|j| self.nodes[j.0].requires_grad)
                .collect();
            let input_grads = grad(&node.op, &inputs, &node.value, &g, &needs);
            for (j, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    match &mut grads[j.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        let mut out = Gradients::default();
        for id in self.trainable_nodes() {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let v = self.value(id);
                    Tensor::new(v.shape().to_vec(), vec![0.0; v.len()]).expect("same shape")
                });
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of node {}", id.0)));
            }
            out.grads.insert(id, g);
        }
        Ok(out)
    }
}

fn need_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected rank-2 tensor, got {:?}", t.shape())))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.shape() == [1, 1] {
        Ok(Broadcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() && a.is_matrix() {
        Ok(Broadcast::Row)
    } else {
        Err(Error::shape(op, format!("{:?} with {:?}", a.shape(), b.shape())))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = match kind {
                Broadcast::Same => b.data()[i],
                Broadcast::Row => b.data()[i % c],
                Broadcast::Scalar => b.data()[0],
            };
            f(x, y)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sums a full-size gradient back down to the broadcast operand's shape.
fn reduce_broadcast(g: Tensor, kind: Broadcast, b: &Tensor) -> Tensor {
    match kind {
        Broadcast::Same => g,
        Broadcast::Scalar => Tensor::new(b.shape().to_vec(), vec![g.data().iter().sum()]).expect("scalar"),
        Broadcast::Row => {
            let c = g.cols();
            let mut out = vec![0.0; c];
            for r in 0..g.rows() {
                for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::new(b.shape().to_vec(), out).expect("row")
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

fn margin_consts(margin: f64) -> (f64, f64, f64, f64) {
    let (sin_m, cos_m) = margin.sin_cos();
    let threshold = (std::f64::consts::PI - margin).cos();
    let fallback = (std::f64::consts::PI - margin).sin() * margin;
    (sin_m, cos_m, threshold, fallback)
}

fn eval(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let out = match op {
        Op::Leaf(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul => {
            need_matrix(name, x[0])?;
            need_matrix(name, x[1])?;
            x[0].matmul(x[1])?
        }
        Op::Add => {
            let k = broadcast_kind(name, x[0], x[1])?;
            zip_broadcast(x[0], x[1], k, |a, b| a + b)
        }
        Op::Mul => {
            let k = broadcast_kind(name, x[0], x[1])?;
            zip_broadcast(x[0], x[1], k, |a, b| a * b)
        }
        Op::Scale(s) => x[0].map(|v| v * s),
        Op::Concat(axis) => concat(x, *axis)?,
        Op::Slice { rows, cols } => {
            let t = x[0];
            need_matrix(name, t)?;
            if rows.end > t.rows() || cols.end > t.cols() || rows.start > rows.end || cols.start > cols.end {
                return Err(Error::shape(
                    name,
                    format!("rows {:?} cols {:?} of {:?}", rows, cols, t.shape()),
                ));
            }
            let mut data = Vec::with_capacity(rows.len() * cols.len());
            for r in rows.clone() {
                data.extend_from_slice(&t.row_slice(r)[cols.clone()]);
            }
            Tensor::matrix(rows.len(), cols.len(), data)?
        }
        Op::Transpose => {
            need_matrix(name, x[0])?;
            x[0].transpose()
        }
        Op::Relu => x[0].map(|v| v.max(0.0)),
        Op::Gelu => x[0].map(gelu),
        Op::LayerNorm { eps } => {
            let t = x[0];
            need_matrix(name, t)?;
            let mut out = t.clone();
            let n = t.cols() as f64;
            for r in 0..t.rows() {
                let row = out.row_slice_mut(r);
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mu) * inv;
                }
            }
            out
        }
        Op::Softmax => {
            let t = x[0];
            need_matrix(name, t)?;
            let mut out = t.clone();
            for r in 0..t.rows() {
                let row = out.row_slice_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            out
        }
        Op::L2Normalize => {
            let t = x[0];
            need_matrix(name, t)?;
            let mut out = t.clone();
            for r in 0..t.rows() {
                let row = out.row_slice_mut(r);
                let n = dot(row, row).sqrt().max(NORM_EPS);
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            out
        }
        Op::Exp => x[0].map(f64::exp),
        Op::Log => x[0].map(f64::ln),
        Op::Mean => Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len().max(1) as f64),
        Op::Sum => Tensor::scalar(x[0].data().iter().sum()),
        Op::Abs => x[0].map(f64::abs),
        Op::Detach => x[0].clone(),
        Op::AngularMargin { margin, targets } => {
            let t = x[0];
            need_matrix(name, t)?;
            if targets.len() != t.rows() {
                return Err(Error::shape(name, format!("{} targets for {} rows", targets.len(), t.rows())));
            }
            let (sin_m, cos_m, threshold, fallback) = margin_consts(*margin);
            let mut out = t.clone();
            for (r, &y) in targets.iter().enumerate() {
                if y >= t.cols() {
                    return Err(Error::OutOfRange { index: y, len: t.cols() });
                }
                let c = t.get(r, y);
                let phi = if c > threshold {
                    let s = (1.0 - c * c).max(0.0).sqrt();
                    c * cos_m - s * sin_m
                } else {
                    c - fallback
                };
                out.set(r, y, phi);
            }
            out
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("{} output", name)));
    }
    Ok(out)
}

fn concat(x: &[&Tensor], axis: Axis) -> Result<Tensor> {
    for t in x {
        need_matrix("concat", t)?;
    }
    match axis {
        Axis::Rows => {
            let c = x[0].cols();
            if x.iter().any(|t| t.cols() != c) {
                return Err(Error::shape(
                    "concat",
                    format!("row concat of {:?}", x.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()),
                ));
            }
            let rows = x.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * c);
            for t in x {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, c, data)
        }
        Axis::Cols => {
            let r = x[0].rows();
            if x.iter().any(|t| t.rows() != r) {
                return Err(Error::shape(
                    "concat",
                    format!("col concat of {:?}", x.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()),
                ));
            }
            let cols: usize = x.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for t in x {
                    data.extend_from_slice(t.row_slice(i));
                }
            }
            Tensor::matrix(r, cols, data)
        }
    }
}

fn grad(op: &Op, x: &[&Tensor], y: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Tensor>> {
        let data = (0..g.len()).map(|i| g.data()[i] * f(i)).collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
    };
    match op {
        Op::Leaf(_) | Op::Detach => vec![None; x.len()],
        Op::MatMul => vec![
            needs[0].then(|| matmul_nt(g, x[1])),
            needs[1].then(|| matmul_tn(x[0], g)),
        ],
        Op::Add => {
            let k = broadcast_kind("add", x[0], x[1]).expect("checked in forward");
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| reduce_broadcast(g.clone(), k, x[1])),
            ]
        }
        Op::Mul => {
            let k = broadcast_kind("mul", x[0], x[1]).expect("checked in forward");
            vec![
                needs[0].then(|| zip_broadcast(g, x[1], k, |a, b| a * b)),
                needs[1].then(|| {
                    let full = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(x[0].data()).map(|(a, b)| a * b).collect(),
                    )
                    .expect("same shape");
                    reduce_broadcast(full, k, x[1])
                }),
            ]
        }
        Op::Scale(s) => vec![Some(g.map(|v| v * s))],
        Op::Concat(axis) => {
            let mut out = Vec::with_capacity(x.len());
            let mut offset = 0;
            for (t, &need) in x.iter().zip(needs) {
                let part = match axis {
                    Axis::Rows => {
                        let c = g.cols();
                        let d = g.data()[offset * c..(offset + t.rows()) * c].to_vec();
                        offset += t.rows();
                        Tensor::matrix(t.rows(), c, d).expect("slice")
                    }
                    Axis::Cols => {
                        let mut d = Vec::with_capacity(t.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row_slice(r)[offset..offset + t.cols()]);
                        }
                        offset += t.cols();
                        Tensor::matrix(t.rows(), t.cols(), d).expect("slice")
                    }
                };
                out.push(need.then_some(part));
            }
            out
        }
        Op::Slice { rows, cols } => {
            let mut full = Tensor::zeros(x[0].rows(), x[0].cols());
            for (i, r) in rows.clone().enumerate() {
                full.row_slice_mut(r)[cols.clone()].copy_from_slice(g.row_slice(i));
            }
            vec![Some(full)]
        }
        Op::Transpose => vec![Some(g.transpose())],
        Op::Relu => elementwise(&|i| if x[0].data()[i] > 0.0 { 1.0 } else { 0.0 }),
        Op::Gelu => elementwise(&|i| gelu_grad(x[0].data()[i])),
        Op::LayerNorm { eps } => {
            let n = x[0].cols() as f64;
            let mut out = Tensor::zeros(x[0].rows(), x[0].cols());
            for r in 0..x[0].rows() {
                let xr = x[0].row_slice(r);
                let mu = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let yr = y.row_slice(r);
                let gr = g.row_slice(r);
                let gmean = gr.iter().sum::<f64>() / n;
                let gy = dot(gr, yr) / n;
                for (o, (gv, yv)) in out.row_slice_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                    *o = inv * (gv - gmean - yv * gy);
                }
            }
            vec![Some(out)]
        }
        Op::Softmax => {
            let mut out = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let yr = y.row_slice(r);
                let gr = g.row_slice(r);
                let s = dot(gr, yr);
                for (o, (gv, yv)) in out.row_slice_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                    *o = yv * (gv - s);
                }
            }
            vec![Some(out)]
        }
        Op::L2Normalize => {
            let mut out = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let xr = x[0].row_slice(r);
                let norm = dot(xr, xr).sqrt();
                let gr = g.row_slice(r);
                let o = out.row_slice_mut(r);
                if norm > NORM_EPS {
                    let yr = y.row_slice(r);
                    let gy = dot(gr, yr);
                    for (ov, (gv, yv)) in o.iter_mut().zip(gr.iter().zip(yr)) {
                        *ov = (gv - yv * gy) / norm;
                    }
                } else {
                    for (ov, gv) in o.iter_mut().zip(gr) {
                        *ov = gv / NORM_EPS;
                    }
                }
            }
            vec![Some(out)]
        }
        Op::Exp => elementwise(&|i| y.data()[i]),
        Op::Log => elementwise(&|i| 1.0 / x[0].data()[i]),
        Op::Mean => {
            let gv = g.data()[0] / x[0].len().max(1) as f64;
            vec![Some(Tensor::new(x[0].shape().to_vec(), vec![gv; x[0].len()]).expect("shape"))]
        }
        Op::Sum => {
            let gv = g.data()[0];
            vec![Some(Tensor::new(x[0].shape().to_vec(), vec![gv; x[0].len()]).expect("shape"))]
        }
        Op::Abs => elementwise(&|i| {
            let v = x[0].data()[i];
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::AngularMargin { margin, targets } => {
            let (sin_m, cos_m, threshold, _) = margin_consts(*margin);
            let mut out = g.clone();
            for (r, &t) in targets.iter().enumerate() {
                let c = x[0].get(r, t);
                let d = if c > threshold {
                    let s = (1.0 - c * c).max(0.0).sqrt().max(NORM_EPS);
                    cos_m + sin_m * c / s
                } else {
                    1.0
                };
                out.set(r, t, g.get(r, t) * d);
            }
            vec![Some(out)]
        }
    }
}
