//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is rebuilt for every batch. Forward values are computed
//! eagerly as nodes are recorded; `backward` walks the tape once in reverse
//! and accumulates gradients into the owning [`ParamStore`].

use super::matrix::DenseMatrix;
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient.
    Constant,
    /// Leaf bound to a parameter in the store.
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    /// Column j multiplied by the fixed factor `factors[j]`.
    ScaleCols(NodeId, Vec<f64>),
    Tanh(NodeId),
    /// Row-wise softmax (numerically stabilized).
    SoftmaxRows(NodeId),
    /// Columns [start, start+len) of the input.
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Stack single-row nodes into one matrix.
    StackRows(Vec<NodeId>),
    /// Bias row added to every row of the input.
    AddRowBroadcast(NodeId, NodeId),
    /// Mean softmax cross-entropy of logits against class labels; scalar out.
    CrossEntropy(NodeId, Vec<usize>),
    /// Sum of all entries; scalar out.
    Sum(NodeId),
}

struct Node {
    value: DenseMatrix,
    grad: DenseMatrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to this node.
    pub fn grad(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Result<NodeId> {
        value.check_finite(op_name(&op))?;
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    /// Record a parameter leaf. The value is snapshotted from the store;
    /// backward will accumulate into the store's grad slot if trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs_rows: va.rows(),
                lhs_cols: va.cols(),
                rhs_rows: vb.rows(),
                rhs_cols: vb.cols(),
            });
        }
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let v = DenseMatrix::from_vec(va.rows(), va.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Multiply column j by factors[j].
    pub fn scale_cols(&mut self, a: NodeId, factors: &[f64]) -> Result<NodeId> {
        let va = self.value(a);
        if va.cols() != factors.len() {
            return Err(Error::contract(format!(
                "scale_cols: {} columns but {} factors",
                va.cols(),
                factors.len()
            )));
        }
        let v = DenseMatrix::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) * factors[j]);
        self.push(v, Op::ScaleCols(a, factors.to_vec()))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.as_slice().iter().map(|x| x.tanh()).collect();
        let v = DenseMatrix::from_vec(va.rows(), va.cols(), data);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let mut v = DenseMatrix::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let row = va.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                v.set(i, j, e / sum);
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of {} columns",
                start + len,
                va.cols()
            )));
        }
        let v = DenseMatrix::from_fn(va.rows(), len, |i, j| va.get(i, start + j));
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = DenseMatrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rows() != rows {
                return Err(Error::contract("concat_cols: row count mismatch"));
            }
            for i in 0..rows {
                for j in 0..vp.cols() {
                    v.set(i, off + j, vp.get(i, j));
                }
            }
            off += vp.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut v = DenseMatrix::zeros(parts.len(), cols);
        for (i, &p) in parts.iter().enumerate() {
            let vp = self.value(p);
            if vp.rows() != 1 || vp.cols() != cols {
                return Err(Error::contract("stack_rows: parts must be 1xN rows"));
            }
            v.row_mut(i).copy_from_slice(vp.row(0));
        }
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    /// `bias` must be a single row; it is added to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                lhs_rows: va.rows(),
                lhs_cols: va.cols(),
                rhs_rows: vb.rows(),
                rhs_cols: vb.cols(),
            });
        }
        let v = DenseMatrix::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) + vb.get(0, j));
        self.push(v, Op::AddRowBroadcast(a, bias))
    }

    /// Mean softmax cross-entropy of `logits` (BxC) against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rows() != labels.len() {
            return Err(Error::contract(format!(
                "cross_entropy: {} logit rows, {} labels",
                vl.rows(),
                labels.len()
            )));
        }
        for &l in labels {
            if l >= vl.cols() {
                return Err(Error::input(format!(
                    "label {l} out of range for {} classes",
                    vl.cols()
                )));
            }
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = vl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let v = DenseMatrix::from_vec(1, 1, vec![total / labels.len() as f64]);
        self.push(v, Op::CrossEntropy(logits, labels.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).as_slice().iter().sum();
        self.push(DenseMatrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Reverse pass from a scalar loss node. Gradients of trainable
    /// parameters accumulate into `store` (repeated calls add up); frozen
    /// parameter grads are left untouched (zero).
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[loss.0].grad.set(0, 0, 1.0);

        for idx in (0..=loss.0).rev() {
            let grad = std::mem::replace(&mut self.nodes[idx].grad, DenseMatrix::zeros(0, 0));
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Constant => {}
                Op::Param(pid) => {
                    let p = store.get_mut(pid);
                    if p.trainable {
                        p.grad.add_assign(&grad);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = grad.matmul(&self.nodes[b.0].value.transpose())?;
                    let db = self.nodes[a.0].value.transpose().matmul(&grad)?;
                    self.nodes[a.0].grad.add_assign(&da);
                    self.nodes[b.0].grad.add_assign(&db);
                }
                Op::Add(a, b) => {
                    self.nodes[a.0].grad.add_assign(&grad);
                    self.nodes[b.0].grad.add_assign(&grad);
                }
                Op::Sub(a, b) => {
                    self.nodes[a.0].grad.add_assign(&grad);
                    let neg = grad.scale(-1.0);
                    self.nodes[b.0].grad.add_assign(&neg);
                }
                Op::Mul(a, b) => {
                    let vb = self.nodes[b.0].value.clone();
                    let va = self.nodes[a.0].value.clone();
                    let da = DenseMatrix::from_fn(grad.rows(), grad.cols(), |i, j| {
                        grad.get(i, j) * vb.get(i, j)
                    });
                    let db = DenseMatrix::from_fn(grad.rows(), grad.cols(), |i, j| {
                        grad.get(i, j) * va.get(i, j)
                    });
                    self.nodes[a.0].grad.add_assign(&da);
                    self.nodes[b.0].grad.add_assign(&db);
                }
                Op::Scale(a, c) => {
                    let da = grad.scale(c);
                    self.nodes[a.0].grad.add_assign(&da);
                }
                Op::Transpose(a) => {
                    let da = grad.transpose();
                    self.nodes[a.0].grad.add_assign(&da);
                }
                Op::ScaleCols(a, factors) => {
                    let da = DenseMatrix::from_fn(grad.rows(), grad.cols(), |i, j| {
                        grad.get(i, j) * factors[j]
                    });
                    self.nodes[a.0].grad.add_assign(&da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = DenseMatrix::from_fn(grad.rows(), grad.cols(), |i, j| {
                        let t = y.get(i, j);
                        grad.get(i, j) * (1.0 - t * t)
                    });
                    self.nodes[a.0].grad.add_assign(&da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = DenseMatrix::zeros(grad.rows(), grad.cols());
                    for i in 0..grad.rows() {
                        let dot: f64 = grad
                            .row(i)
                            .iter()
                            .zip(y.row(i))
                            .map(|(g, s)| g * s)
                            .sum();
                        for j in 0..grad.cols() {
                            da.set(i, j, y.get(i, j) * (grad.get(i, j) - dot));
                        }
                    }
                    self.nodes[a.0].grad.add_assign(&da);
                }
                Op::SliceCols(a, start, len) => {
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..grad.rows() {
                        for j in 0..len {
                            let v = ga.get(i, start + j) + grad.get(i, j);
                            ga.set(i, start + j, v);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.cols();
                        let gp = &mut self.nodes[p.0].grad;
                        for i in 0..grad.rows() {
                            for j in 0..cols {
                                let v = gp.get(i, j) + grad.get(i, off + j);
                                gp.set(i, j, v);
                            }
                        }
                        off += cols;
                    }
                }
                Op::StackRows(parts) => {
                    for (i, p) in parts.iter().enumerate() {
                        let gp = &mut self.nodes[p.0].grad;
                        for j in 0..grad.cols() {
                            let v = gp.get(0, j) + grad.get(i, j);
                            gp.set(0, j, v);
                        }
                    }
                }
                Op::AddRowBroadcast(a, bias) => {
                    self.nodes[a.0].grad.add_assign(&grad);
                    let gb = &mut self.nodes[bias.0].grad;
                    for j in 0..grad.cols() {
                        let col_sum: f64 = (0..grad.rows()).map(|i| grad.get(i, j)).sum();
                        gb.set(0, j, gb.get(0, j) + col_sum);
                    }
                }
                Op::CrossEntropy(logits, labels) => {
                    let g = grad.get(0, 0) / labels.len() as f64;
                    let vl = self.nodes[logits.0].value.clone();
                    let mut dl = DenseMatrix::zeros(vl.rows(), vl.cols());
                    for (i, &label) in labels.iter().enumerate() {
                        let row = vl.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..vl.cols() {
                            let soft = exps[j] / sum;
                            let ind = if j == label { 1.0 } else { 0.0 };
                            dl.set(i, j, g * (soft - ind));
                        }
                    }
                    self.nodes[logits.0].grad.add_assign(&dl);
                }
                Op::Sum(a) => {
                    let g = grad.get(0, 0);
                    let ga = &mut self.nodes[a.0].grad;
                    for v in ga.as_mut_slice() {
                        *v += g;
                    }
                }
            }
            self.nodes[idx].grad = grad;
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Transpose(_) => "transpose",
        Op::ScaleCols(..) => "scale_cols",
        Op::Tanh(_) => "tanh",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::StackRows(_) => "stack_rows",
        Op::AddRowBroadcast(..) => "add_row_broadcast",
        Op::CrossEntropy(..) => "cross_entropy",
        Op::Sum(_) => "sum",
    }
}
