use crate::error::{Error, Result};
use crate::tensor::{Lu, Tensor};

use super::params::{Gradients, ParamStore};

/// Index of a node on a [`Tape`]. Inputs always precede their consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary op is broadcast against the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1×n` against `m×n`.
    Row,
    /// `m×1` against `m×n`.
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Tanh,
    Exp,
    Log,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Gather {
        name: String,
        indices: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Binary(Binary, Bcast, NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Unary(Unary, NodeId),
    Clamp(NodeId, f64, f64),
    /// Softmax across the columns of each row.
    SoftmaxRows(NodeId),
    /// `m×n → m×1`.
    RowSums(NodeId),
    /// `m×n → 1×n`.
    ColSums(NodeId),
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice {
        input: NodeId,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    Inverse(NodeId),
    /// `log|det(A)|`; caches `A⁻¹` for the backward pass.
    LogDet(NodeId, Tensor),
    MaskedFill(NodeId, Vec<bool>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of primitives with eagerly computed forward values.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
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

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: name.to_string(),
            });
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) | Op::Gather { .. } => true,
            other => inputs(other).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, value, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        self.push(Op::Param(name.to_string()), value, "param")
    }

    /// Rows `indices` of the parameter matrix `name`, as an embedding lookup.
    pub fn gather(&mut self, store: &ParamStore, name: &str, indices: &[usize]) -> Result<NodeId> {
        let table = store.value(name)?;
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= table.rows()) {
            return Err(Error::shape(
                "gather",
                format!("row {bad} out of {} in `{name}`", table.rows()),
            ));
        }
        let cols = table.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(table.row(i));
        }
        let value = Tensor::new(indices.len(), cols, data)?;
        self.push(
            Op::Gather {
                name: name.to_string(),
                indices: indices.to_vec(),
            },
            value,
            "gather",
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value, "transpose")
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId, name: &'static str) -> Result<NodeId> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let bcast = if [ar, ac] == [br, bc] {
            Bcast::Same
        } else if br == 1 && bc == 1 {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else if bc == 1 && br == ar {
            Bcast::Col
        } else {
            return Err(Error::shape(name, format!("{:?} with {:?}", [ar, ac], [br, bc])));
        };
        let (x, y) = (self.value(a), self.value(b));
        let f = |l: f64, r: f64| match kind {
            Binary::Add => l + r,
            Binary::Sub => l - r,
            Binary::Mul => l * r,
            Binary::Div => l / r,
        };
        let value = Tensor::from_fn(ar, ac, |i, j| f(x.get(i, j), broadcast_get(y, bcast, i, j)));
        self.push(Op::Binary(kind, bcast, a, b), value, name)
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v + s);
        self.push(Op::AddScalar(a), value, "add_scalar")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * s);
        self.push(Op::Scale(a, s), value, "scale")
    }

    fn unary(&mut self, kind: Unary, a: NodeId, name: &'static str) -> Result<NodeId> {
        let x = self.value(a);
        if kind == Unary::Log && x.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite {
                what: "log of non-positive value".into(),
            });
        }
        let value = x.map(|v| match kind {
            Unary::Tanh => v.tanh(),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Unary::Relu => v.max(0.0),
        });
        self.push(Op::Unary(kind, a), value, name)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a, "tanh")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a, "log")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a, "sigmoid")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a, "relu")
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value, "clamp")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(Op::SoftmaxRows(a), out, "softmax")
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let value = Tensor::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        self.push(Op::RowSums(a), value, "row_sums")
    }

    pub fn col_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let value = Tensor::from_fn(1, x.cols(), |_, j| (0..x.rows()).map(|i| x.get(i, j)).sum());
        self.push(Op::ColSums(a), value, "col_sums")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value, "sum")
    }

    /// Side-by-side concatenation; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", "empty"))?)[0];
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatCols(parts.to_vec()), value, "concat_cols")
    }

    /// Stacked concatenation; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", "empty"))?)[1];
        if parts.iter().any(|&p| self.shape(p)[1] != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let value = Tensor::new(data.len() / cols, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), value, "concat_rows")
    }

    /// Sub-block `rows.0..rows.1 × cols.0..cols.1`.
    pub fn slice(&mut self, a: NodeId, rows: (usize, usize), cols: (usize, usize)) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if rows.0 >= rows.1 || cols.0 >= cols.1 || rows.1 > r || cols.1 > c {
            return Err(Error::shape("slice", format!("{rows:?}x{cols:?} of {:?}", [r, c])));
        }
        let x = self.value(a);
        let value = Tensor::from_fn(rows.1 - rows.0, cols.1 - cols.0, |i, j| {
            x.get(rows.0 + i, cols.0 + j)
        });
        self.push(Op::Slice { input: a, rows, cols }, value, "slice")
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let c = self.shape(a)[1];
        self.slice(a, (start, end), (0, c))
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Lu::factor(self.value(a))?.inverse();
        self.push(Op::Inverse(a), value, "inverse")
    }

    /// `log|det(A)|` from an LU factorization.
    pub fn logdet(&mut self, a: NodeId) -> Result<NodeId> {
        let lu = Lu::factor(self.value(a))?;
        let value = Tensor::scalar(lu.log_abs_det());
        let inv = lu.inverse();
        self.push(Op::LogDet(a, inv), value, "logdet")
    }

    /// Replace entries where `mask` is true by `fill`; no gradient flows there.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], fill: f64) -> Result<NodeId> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::shape("masked_fill", "mask length"));
        }
        let data = x
            .as_slice()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(x.rows(), x.cols(), data)?;
        self.push(Op::MaskedFill(a, mask.to_vec()), value, "masked_fill")
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// parameter reachable from it.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", format!("loss is {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient at node {id}"),
                });
            }
            self.backprop(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    /// Run [`Tape::gradients`] and add the result into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads)
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: NodeId, g: Tensor) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => out.add_dense(name, &g),
            Op::Gather { name, indices } => {
                for (k, &row) in indices.iter().enumerate() {
                    out.add_row(name, row, g.row(k));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.send(grads, *a, g.matmul(&bv.transpose())?);
                }
                if self.nodes[b.0].needs_grad {
                    self.send(grads, *b, av.transpose().matmul(&g)?);
                }
            }
            Op::Transpose(a) => self.send(grads, *a, g.transpose()),
            Op::Binary(kind, bcast, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => (
                        Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                            g.get(i, j) * broadcast_get(bv, *bcast, i, j)
                        }),
                        g.zip_map(av, |gv, x| gv * x),
                    ),
                    Binary::Div => (
                        Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                            g.get(i, j) / broadcast_get(bv, *bcast, i, j)
                        }),
                        Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                            let d = broadcast_get(bv, *bcast, i, j);
                            -g.get(i, j) * av.get(i, j) / (d * d)
                        }),
                    ),
                };
                self.send(grads, *a, ga);
                self.send(grads, *b, reduce_broadcast(&gb, *bcast));
            }
            Op::AddScalar(a) => self.send(grads, *a, g),
            Op::Scale(a, s) => self.send(grads, *a, g.map(|v| v * s)),
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let local = match kind {
                    Unary::Tanh => y.map(|t| 1.0 - t * t),
                    Unary::Exp => y.clone(),
                    Unary::Log => x.map(|v| 1.0 / v),
                    Unary::Sigmoid => y.map(|s| s * (1.0 - s)),
                    Unary::Relu => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                };
                self.send(grads, *a, g.zip_map(&local, |gv, l| gv * l));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let masked = g.zip_map(x, |gv, v| if v >= *lo && v <= *hi { gv } else { 0.0 });
                self.send(grads, *a, masked);
            }
            Op::SoftmaxRows(a) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for j in 0..y.cols() {
                        gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.send(grads, *a, gx);
            }
            Op::RowSums(a) => {
                let [r, c] = self.shape(*a);
                self.send(grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::ColSums(a) => {
                let [r, c] = self.shape(*a);
                self.send(grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::SumAll(a) => {
                let [r, c] = self.shape(*a);
                self.send(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [r, c] = self.shape(p);
                    let part = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                    offset += c;
                    self.send(grads, p, part);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    self.send(grads, p, g.slice_rows(offset, offset + r));
                    offset += r;
                }
            }
            Op::Slice { input, rows, cols } => {
                let [r, c] = self.shape(*input);
                let mut gx = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        gx.set(rows.0 + i, cols.0 + j, g.get(i, j));
                    }
                }
                self.send(grads, *input, gx);
            }
            Op::Inverse(a) => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  ⇒  Ā = -Bᵀ Ḡ Bᵀ
                let bt = y.transpose();
                let ga = bt.matmul(&g)?.matmul(&bt)?.map(|v| -v);
                self.send(grads, *a, ga);
            }
            Op::LogDet(a, inv) => {
                let s = g.item();
                self.send(grads, *a, inv.transpose().map(|v| v * s));
            }
            Op::MaskedFill(a, mask) => {
                let data = g
                    .as_slice()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { 0.0 } else { v })
                    .collect();
                self.send(grads, *a, Tensor::new(g.rows(), g.cols(), data)?);
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Constant | Op::Param(_) | Op::Gather { .. } => vec![],
        Op::MatMul(a, b) | Op::Binary(_, _, a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::AddScalar(a)
        | Op::Scale(a, _)
        | Op::Unary(_, a)
        | Op::Clamp(a, _, _)
        | Op::SoftmaxRows(a)
        | Op::RowSums(a)
        | Op::ColSums(a)
        | Op::SumAll(a)
        | Op::Inverse(a)
        | Op::LogDet(a, _)
        | Op::MaskedFill(a, _) => vec![*a],
        Op::Slice { input, .. } => vec![*input],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
    }
}

#[inline]
fn broadcast_get(t: &Tensor, bcast: Bcast, i: usize, j: usize) -> f64 {
    match bcast {
        Bcast::Same => t.get(i, j),
        Bcast::Row => t.get(0, j),
        Bcast::Col => t.get(i, 0),
        Bcast::Scalar => t.get(0, 0),
    }
}

fn reduce_broadcast(g: &Tensor, bcast: Bcast) -> Tensor {
    match bcast {
        Bcast::Same => g.clone(),
        Bcast::Row => Tensor::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum()),
        Bcast::Col => Tensor::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum()),
        Bcast::Scalar => Tensor::scalar(g.sum()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Init;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t, Init::Given).unwrap();
        s
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let mut store = store_with("a", a);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let x = tape.constant(Tensor::col_vector(&[0.5, -1.0, 2.0])).unwrap();
        let ax = tape.matmul(a, x).unwrap();
        let loss = tape.sum(ax).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let expected = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0]]).unwrap();
        assert_eq!(store.grad("a").unwrap(), &expected);
    }

    #[test]
    fn logdet_gradient_on_diagonal() {
        let mut store = store_with("a", Tensor::diag(&[2.0, 5.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let ld = tape.logdet(a).unwrap();
        assert!((tape.value(ld).item() - 10f64.ln()).abs() < 1e-12);
        tape.backward(ld, &mut store).unwrap();
        let g = store.grad("a").unwrap();
        assert!(g.max_abs_diff(&Tensor::diag(&[0.5, 0.2])) < 1e-15);
    }

    #[test]
    fn inverse_backward_identity() {
        let a = Tensor::from_rows(&[
            vec![3.0, 0.5, -0.2],
            vec![0.1, 2.0, 0.3],
            vec![-0.4, 0.2, 4.0],
        ])
        .unwrap();
        let mut store = store_with("a", a.clone());
        let mut tape = Tape::new();
        let an = tape.param(&store, "a").unwrap();
        let b = tape.inverse(an).unwrap();
        let loss = tape.sum(b).unwrap();
        tape.backward(loss, &mut store).unwrap();

        let bt = crate::tensor::inverse(&a).unwrap().transpose();
        let ones = Tensor::full(3, 3, 1.0);
        let expected = bt.matmul(&ones).unwrap().matmul(&bt).unwrap().map(|v| -v);
        assert!(store.grad("a").unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn logdet_matches_log_of_determinant() {
        let a = Tensor::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let an = tape.constant(a).unwrap();
        let ld = tape.logdet(an).unwrap();
        assert!((tape.value(ld).item() - 10f64.ln()).abs() <= 1e-10 * 10f64.ln());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = store_with("a", Tensor::zeros(2, 2));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        assert!(matches!(tape.gradients(a), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(3, 2)).unwrap();
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn singular_inverse_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(2, 2, 1.0)).unwrap();
        assert!(matches!(tape.inverse(a), Err(Error::Singular { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn unreachable_parameters_get_no_gradient() {
        let mut store = store_with("a", Tensor::scalar(2.0));
        store.insert("b", Tensor::scalar(3.0), Init::Given).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let _b = tape.param(&store, "b").unwrap();
        let sq = tape.mul(a, a).unwrap();
        let grads = tape.gradients(sq).unwrap();
        assert!(grads.get("b").is_none());
        assert_eq!(grads.dense("b", &store).unwrap().item(), 0.0);
        assert_eq!(grads.dense("a", &store).unwrap().item(), 4.0);
    }
}
