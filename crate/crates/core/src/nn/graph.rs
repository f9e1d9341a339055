//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order of the graph and the backward sweep is a single reverse pass.

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    Gather(NodeId, Vec<usize>),
    RowSum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to `id`; zero if `id` does not
    /// influence the output.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.adjoints[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn is_reached(&self, id: NodeId) -> bool {
        self.adjoints[id.0].is_some()
    }
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn matmul_raw(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * cols..(k + 1) * cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contribution: &[f64]) {
    match slot {
        Some(t) => {
            for (a, &c) in t.data_mut().iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), contribution.to_vec())),
    }
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a parameter or constant.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k) = ta.dims2();
        let (k2, c) = tb.dims2();
        if k != k2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), r, k, tb.data(), c);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![r, c], out)))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (r, c) = ta.dims2();
        if tb.len() != c {
            return Err(shape_err("add_bias", ta, tb));
        }
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += tb.data()[j];
            }
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::AddBias(a, bias), Tensor::from_parts(shape, out)))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("elementwise", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(op, Tensor::from_parts(shape, out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.unary(a, Op::Offset(a), |x| x + shift)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, NnError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if start >= end || end > c {
            return Err(NnError::Shape(format!("slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&ta.data()[i * c + start..i * c + end]);
        }
        Ok(self.push(Op::SliceCols(a, start, end), Tensor::from_parts(vec![r, w], out)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).dims2().0,
            None => return Err(NnError::Shape("concat of nothing".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(NnError::Shape(format!("concat rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_parts(vec![rows, total], out)))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = ta.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Op::LogSoftmax(a), Tensor::from_parts(shape, out))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(super::softmax_slice(ta.row(i)));
        }
        let shape = ta.shape().to_vec();
        self.push(Op::Softmax(a), Tensor::from_parts(shape, out))
    }

    /// `out[i] = a[i, index[i]]`, shape `[rows, 1]`.
    pub fn gather(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId, NnError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if index.len() != r || index.iter().any(|&j| j >= c) {
            return Err(NnError::Shape(format!("gather of {} indices from [{r}, {c}]", index.len())));
        }
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &j)| ta.data()[i * c + j]).collect();
        Ok(self.push(Op::Gather(a, index.to_vec()), Tensor::from_parts(vec![r, 1], out)))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, _) = ta.dims2();
        let out: Vec<f64> = (0..r).map(|i| ta.row(i).iter().sum()).collect();
        self.push(Op::RowSum(a), Tensor::from_parts(vec![r, 1], out))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, NnError> {
        if self.value(output).len() != 1 {
            return Err(NnError::NonScalar(self.value(output).shape().to_vec()));
        }
        let n = output.0 + 1;
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let gd = g.data();
            let val = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, k) = ta.dims2();
                    let (_, c) = tb.dims2();
                    // dA = G B^T
                    let mut da = vec![0.0; r * k];
                    for i in 0..r {
                        for kk in 0..k {
                            let brow = &tb.data()[kk * c..(kk + 1) * c];
                            let grow = &gd[i * c..(i + 1) * c];
                            da[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = A^T G
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        for kk in 0..k {
                            let aik = ta.data()[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                db[kk * c + j] += aik * gd[i * c + j];
                            }
                        }
                    }
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                    accumulate(&mut adj[b.0], &shapes[b.0], &db);
                }
                Op::AddBias(a, b) => {
                    let (r, c) = node.value.dims2();
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += gd[i * c + j];
                        }
                    }
                    accumulate(&mut adj[a.0], &shapes[a.0], gd);
                    accumulate(&mut adj[b.0], &shapes[b.0], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], &shapes[a.0], gd);
                    accumulate(&mut adj[b.0], &shapes[b.0], gd);
                }
                Op::Sub(a, b) => {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], gd);
                    accumulate(&mut adj[b.0], &shapes[b.0], &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let da: Vec<f64> = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                    accumulate(&mut adj[b.0], &shapes[b.0], &db);
                }
                Op::Scale(a, f) => {
                    let da: Vec<f64> = gd.iter().map(|g| g * f).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Offset(a) => accumulate(&mut adj[a.0], &shapes[a.0], gd),
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let da: Vec<f64> = gd.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = gd.iter().zip(val).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = gd.iter().zip(val).map(|(g, y)| g * y).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Ln(a) => {
                    let x = self.value(*a).data();
                    let da: Vec<f64> = gd.iter().zip(x).map(|(g, v)| g / v).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let da: Vec<f64> = gd.iter().zip(x).map(|(g, v)| 2.0 * g * v).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a).data();
                    let da: Vec<f64> =
                        gd.iter().zip(x).map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 }).collect();
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.value(*a).dims2();
                    let w = end - start;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = node.value.dims2();
                    let mut offset = 0;
                    for p in parts {
                        let (_, w) = self.value(*p).dims2();
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut adj[p.0], &shapes[p.0], &dp);
                        offset += w;
                    }
                }
                Op::LogSoftmax(a) => {
                    let (r, c) = node.value.dims2();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let gsum: f64 = gd[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            da[i * c + j] = gd[i * c + j] - val[i * c + j].exp() * gsum;
                        }
                    }
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Softmax(a) => {
                    let (r, c) = node.value.dims2();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| gd[i * c + j] * val[i * c + j]).sum();
                        for j in 0..c {
                            da[i * c + j] = val[i * c + j] * (gd[i * c + j] - dot);
                        }
                    }
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Gather(a, index) => {
                    let (r, c) = self.value(*a).dims2();
                    let mut da = vec![0.0; r * c];
                    for (i, &j) in index.iter().enumerate() {
                        da[i * c + j] = gd[i];
                    }
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).dims2();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = gd[i]);
                    }
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Sum(a) => {
                    let da = vec![gd[0]; self.value(*a).len()];
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let da = vec![gd[0] / n as f64; n];
                    accumulate(&mut adj[a.0], &shapes[a.0], &da);
                }
            }
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }
        Ok(Gradients { adjoints: adj, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(w, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 6.0);
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.leaf(Tensor::vector(vec![4.0, 5.0]));
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).data().iter().all(|&v| v == 0.0));
        assert!(!g.is_reached(w));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(NnError::NonScalar(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x + 3x) -> df/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let s = tape.add(sq, lin).unwrap();
        let f = tape.sum(s);
        let g = tape.backward(f).unwrap().get(x);
        assert_eq!(g.data(), &[5.0, -1.0]);
    }

    fn fd_check(build: impl Fn(&mut Tape, NodeId) -> NodeId, x0: Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(x0.clone()));
        let out = build(&mut tape, x);
        let g = tape.backward(out).unwrap().get(x);
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xs = x0.clone();
                xs[i] += delta;
                let mut t = Tape::new();
                let xi = t.leaf(Tensor::vector(xs));
                let o = build(&mut t, xi);
                t.value(o).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = vec![0.3, -0.7, 1.2, 0.05];
        fd_check(|t, x| { let y = t.tanh(x); t.sum(y) }, x0.clone());
        fd_check(|t, x| { let y = t.exp(x); t.mean(y) }, x0.clone());
        fd_check(|t, x| { let s = t.square(x); let o = t.offset(s, 1.0); let l = t.ln(o); t.sum(l) }, x0.clone());
        fd_check(|t, x| { let y = t.clamp(x, -0.5, 0.5); let s = t.square(y); t.sum(s) }, x0.clone());
    }

    #[test]
    fn row_ops_match_finite_differences() {
        let x0 = vec![0.3, -0.7, 1.2, 0.05, 0.4, -0.1];
        let as_mat = |t: &mut Tape, x: NodeId| {
            let a = t.slice_cols(x, 0, 3).unwrap();
            let b = t.slice_cols(x, 3, 6).unwrap();
            (a, b)
        };
        fd_check(
            move |t, x| {
                let (a, b) = as_mat(t, x);
                let c = t.concat_cols(&[b, a]).unwrap();
                let ls = t.log_softmax(c);
                let g = t.gather(ls, &[4]).unwrap();
                t.sum(g)
            },
            x0.clone(),
        );
        fd_check(
            move |t, x| {
                let sm = t.softmax(x);
                let w = t.leaf(Tensor::vector(vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0]));
                let p = t.mul(sm, w).unwrap();
                let r = t.row_sum(p);
                t.sum(r)
            },
            x0,
        );
    }
}
