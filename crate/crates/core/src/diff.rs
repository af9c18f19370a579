//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every primitive applied to its nodes together with the
//! computed value. [`Graph::grad`] then walks the record backwards once and
//! applies each primitive's adjoint rule. Values are always [`Matrix`]; a
//! scalar is a 1x1 matrix and a vector is a column.
//!
//! ```
//! use hes_core::diff::Graph;
//! use hes_core::linalg::Matrix;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Matrix::column(&[1.0, 2.0]));
//! let sq = g.square(x);
//! let y = g.sum(sq);
//! let grads = g.grad(y, &[x]).unwrap();
//! assert_eq!(grads[0].as_slice(), &[2.0, 4.0]);
//! ```
//!
//! Primitives outside the built-in set can be recorded with
//! [`Graph::custom`]; their adjoint must be registered with
//! [`Graph::register`] before calling `grad`.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Side};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("no adjoint rule registered for primitive `{0}`")]
    UnregisteredPrimitive(String),
    #[error("objective must be a scalar, got a {rows}x{cols} value")]
    NonScalarObjective { rows: usize, cols: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a user-supplied primitive.
///
/// Given the input values, the output value and the gradient flowing into the
/// output, returns one gradient per input (same shapes as the inputs).
pub trait AdjointRule: Send + Sync {
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, out_grad: &Matrix) -> Vec<Matrix>;
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MulConst(NodeId, Matrix),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Logistic(NodeId),
    ClipMax(NodeId, f64),
    Sum(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    SqDist(NodeId, NodeId),
    Cholesky(NodeId),
    TriSolve(NodeId, NodeId, Side),
    SmoothMaxCols(NodeId, f64),
    MaxCols(NodeId, Vec<usize>),
    Reshape(NodeId),
    Rows(NodeId, usize),
    Element(NodeId, usize, usize),
    VStack(Vec<NodeId>),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    Custom(String, Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Build it, read values, then call [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    rules: HashMap<String, Arc<dyn AdjointRule>>,
}

/// `temperature · log Σ exp(vᵢ / temperature)`, computed with max subtraction.
pub fn smooth_max(v: &[f64], temperature: f64) -> f64 {
    assert!(temperature > 0.0, "temperature must be positive");
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| ((x - m) / temperature).exp()).sum();
    m + temperature * s.ln()
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers the adjoint for a custom primitive name.
    pub fn register(&mut self, name: &str, rule: Arc<dyn AdjointRule>) {
        self.rules.insert(name.to_string(), rule);
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.to_scalar()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: NodeId, c: Matrix) -> NodeId {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise square root; negative inputs are clamped to zero and the
    /// gradient at zero is taken as zero.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn logistic(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(logistic);
        self.push(v, Op::Logistic(a))
    }

    /// Elementwise `min(a, cap)`.
    pub fn clip_max(&mut self, a: NodeId, cap: f64) -> NodeId {
        let v = self.value(a).map(|x| x.min(cap));
        self.push(v, Op::ClipMax(a, cap))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Column sums, as a `1 x cols` row.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut v = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, x) in v.as_mut_slice().iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        self.push(v, Op::SumRows(a))
    }

    /// Row sums, as a `rows x 1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Matrix::from_vec(
            m.rows(),
            1,
            (0..m.rows()).map(|r| m.row(r).iter().sum()).collect(),
        );
        self.push(v, Op::SumCols(a))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Pairwise squared distances between the rows of `a` (n x d) and `b` (m x d).
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = sq_dist_value(self.value(a), self.value(b));
        self.push(v, Op::SqDist(a, b))
    }

    /// Lower Cholesky factor of the symmetric part of `a`.
    ///
    /// Jitter is escalated exactly as in [`linalg::cholesky`]; the jitter is
    /// treated as a constant when differentiating.
    pub fn cholesky(&mut self, a: NodeId, base_jitter: f64) -> Result<NodeId, DiffError> {
        let sym = self.value(a).symmetrized();
        let f = linalg::cholesky(&sym, base_jitter)?;
        Ok(self.push(f.lower().clone(), Op::Cholesky(a)))
    }

    /// `L⁻¹ b` (`Side::Lower`) or `L⁻ᵀ b` (`Side::Upper`) for lower-triangular `l`.
    pub fn tri_solve(&mut self, l: NodeId, b: NodeId, side: Side) -> Result<NodeId, DiffError> {
        let (lv, bv) = (self.value(l), self.value(b));
        if !lv.is_square() || lv.rows() != bv.rows() {
            return Err(LinalgError::DimensionMismatch {
                expected: lv.rows(),
                found: bv.rows(),
            }
            .into());
        }
        let v = linalg::solve_lower_raw(lv, bv, side);
        Ok(self.push(v, Op::TriSolve(l, b, side)))
    }

    /// Per-column smooth maximum, as a `1 x cols` row.
    pub fn smooth_max_cols(&mut self, a: NodeId, temperature: f64) -> NodeId {
        assert!(temperature > 0.0, "temperature must be positive");
        let m = self.value(a);
        let v = Matrix::from_vec(
            1,
            m.cols(),
            (0..m.cols())
                .map(|c| smooth_max(&m.col_vec(c), temperature))
                .collect(),
        );
        self.push(v, Op::SmoothMaxCols(a, temperature))
    }

    /// Per-column hard maximum. The subgradient goes to the first attaining row.
    pub fn max_cols(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut idx = Vec::with_capacity(m.cols());
        let mut v = Matrix::zeros(1, m.cols());
        for c in 0..m.cols() {
            let mut best = 0;
            for r in 1..m.rows() {
                if m[(r, c)] > m[(best, c)] {
                    best = r;
                }
            }
            idx.push(best);
            v[(0, c)] = m[(best, c)];
        }
        self.push(v, Op::MaxCols(a, idx))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a).reshape(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let m = self.value(a);
        let cols = m.cols();
        let v = Matrix::from_vec(
            len,
            cols,
            m.as_slice()[start * cols..(start + len) * cols].to_vec(),
        );
        self.push(v, Op::Rows(a, start))
    }

    pub fn element(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let v = Matrix::scalar(self.value(a)[(r, c)]);
        self.push(v, Op::Element(a, r, c))
    }

    pub fn vstack(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::vstack(&mats);
        self.push(v, Op::VStack(parts.to_vec()))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let m = self.value(a);
        assert_eq!(m.rows(), 1, "broadcast_rows expects a row");
        let mut data = Vec::with_capacity(n * m.cols());
        for _ in 0..n {
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::from_vec(n, m.cols(), data);
        self.push(v, Op::BroadcastRows(a))
    }

    /// Repeats an `r x 1` column `n` times.
    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> NodeId {
        let m = self.value(a);
        assert_eq!(m.cols(), 1, "broadcast_cols expects a column");
        let mut v = Matrix::zeros(m.rows(), n);
        for r in 0..m.rows() {
            v.row_mut(r).fill(m[(r, 0)]);
        }
        self.push(v, Op::BroadcastCols(a))
    }

    /// Records a primitive whose value was computed by the caller.
    pub fn custom(&mut self, name: &str, inputs: &[NodeId], value: Matrix) -> NodeId {
        self.push(value, Op::Custom(name.to_string(), inputs.to_vec()))
    }

    /// Gradients of the scalar `objective` with respect to each node in `wrt`.
    pub fn grad(&self, objective: NodeId, wrt: &[NodeId]) -> Result<Vec<Matrix>, DiffError> {
        let out = self.value(objective);
        if out.shape() != (1, 1) {
            return Err(DiffError::NonScalarObjective {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; objective.0 + 1];
        adj[objective.0] = Some(Matrix::scalar(1.0));
        for i in (0..=objective.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|w| {
                adj.get(w.0)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| Matrix::zeros(self.value(*w).rows(), self.value(*w).cols()))
            })
            .collect())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<(), DiffError> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |id: NodeId, d: Matrix| {
            if !self.wants(id) {
                return;
            }
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Neg(a) => acc(*a, g.scale(-1.0)),
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, g.matmul_t(bv));
                }
                if self.wants(*b) {
                    acc(*b, av.t_matmul(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Exp(a) => acc(*a, g.zip_map(y, |x, e| x * e)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, v| x / v)),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |x, v| 2.0 * x * v)),
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(y, |x, s| if s > 0.0 { x / (2.0 * s) } else { 0.0 }),
            ),
            Op::Logistic(a) => acc(*a, g.zip_map(y, |x, s| x * s * (1.0 - s))),
            Op::ClipMax(a, cap) => acc(
                *a,
                g.zip_map(self.value(*a), |x, v| if v < *cap { x } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Matrix::filled(av.rows(), av.cols(), g.to_scalar()));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    d.row_mut(r).copy_from_slice(g.as_slice());
                }
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    d.row_mut(r).fill(g[(r, 0)]);
                }
                acc(*a, d);
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                let mut ga = Matrix::zeros(av.rows(), d);
                let mut gb = Matrix::zeros(bv.rows(), d);
                for r in 0..av.rows() {
                    for s in 0..bv.rows() {
                        let w = 2.0 * g[(r, s)];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = av[(r, k)] - bv[(s, k)];
                            ga[(r, k)] += w * diff;
                            gb[(s, k)] -= w * diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Cholesky(a) => acc(*a, cholesky_adjoint(y, g)),
            Op::TriSolve(l, b, side) => {
                let lv = self.value(*l);
                // Gradient with respect to the right-hand side.
                let other = match side {
                    Side::Lower => Side::Upper,
                    Side::Upper => Side::Lower,
                };
                let gb = linalg::solve_lower_raw(lv, g, other);
                if self.wants(*l) {
                    let gl = match side {
                        Side::Lower => gb.matmul_t(y),
                        Side::Upper => y.matmul_t(&gb),
                    };
                    acc(*l, gl.lower_triangle().scale(-1.0));
                }
                acc(*b, gb);
            }
            Op::SmoothMaxCols(a, t) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for c in 0..av.cols() {
                    let top = y[(0, c)];
                    for r in 0..av.rows() {
                        d[(r, c)] = g[(0, c)] * ((av[(r, c)] - top) / t).exp();
                    }
                }
                acc(*a, d);
            }
            Op::MaxCols(a, idx) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for (c, &r) in idx.iter().enumerate() {
                    d[(r, c)] = g[(0, c)];
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let av = self.value(*a);
                acc(*a, g.reshape(av.rows(), av.cols()));
            }
            Op::Rows(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                let cols = av.cols();
                d.as_mut_slice()[start * cols..start * cols + g.len()].copy_from_slice(g.as_slice());
                acc(*a, d);
            }
            Op::Element(a, r, c) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                d[(*r, *c)] = g.to_scalar();
                acc(*a, d);
            }
            Op::VStack(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    let d = Matrix::from_vec(
                        pv.rows(),
                        pv.cols(),
                        g.as_slice()[start..start + n].to_vec(),
                    );
                    start += n;
                    acc(*p, d);
                }
            }
            Op::BroadcastRows(a) => {
                let mut d = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in d.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::BroadcastCols(a) => {
                let d = Matrix::from_vec(
                    g.rows(),
                    1,
                    (0..g.rows()).map(|r| g.row(r).iter().sum()).collect(),
                );
                acc(*a, d);
            }
            Op::Custom(name, inputs) => {
                let rule = self
                    .rules
                    .get(name)
                    .ok_or_else(|| DiffError::UnregisteredPrimitive(name.clone()))?;
                let ins: Vec<&Matrix> = inputs.iter().map(|p| self.value(*p)).collect();
                let grads = rule.backward(&ins, y, g);
                for (p, d) in inputs.iter().zip(grads) {
                    acc(*p, d);
                }
            }
        }
        Ok(())
    }
}

fn parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Const => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::SqDist(a, b) => {
            vec![*a, *b]
        }
        Op::TriSolve(l, b, _) => vec![*l, *b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Offset(a)
        | Op::MulConst(a, _)
        | Op::Transpose(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Logistic(a)
        | Op::ClipMax(a, _)
        | Op::Sum(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::Cholesky(a)
        | Op::SmoothMaxCols(a, _)
        | Op::MaxCols(a, _)
        | Op::Reshape(a)
        | Op::Rows(a, _)
        | Op::Element(a, _, _)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a) => vec![*a],
        Op::VStack(parts) | Op::Custom(_, parts) => parts.clone(),
    }
}

pub(crate) fn sq_dist_value(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "sq_dist dimension mismatch");
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for r in 0..a.rows() {
        let ar = a.row(r);
        for s in 0..b.rows() {
            out[(r, s)] = ar
                .iter()
                .zip(b.row(s))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    out
}

/// Adjoint of the Cholesky factorization for a symmetric input:
/// `Ā = ½ L⁻ᵀ (P + Pᵀ) L⁻¹` with `P = Φ(Lᵀ L̄)`, where `Φ` keeps the lower
/// triangle and halves the diagonal.
fn cholesky_adjoint(l: &Matrix, l_bar: &Matrix) -> Matrix {
    let n = l.rows();
    let mut p = l.t_matmul(&l_bar.lower_triangle()).lower_triangle();
    for i in 0..n {
        p[(i, i)] *= 0.5;
    }
    let s = p.add(&p.transpose());
    // L⁻ᵀ S L⁻¹ = L⁻ᵀ (L⁻ᵀ Sᵀ)ᵀ, and S is symmetric.
    let left = linalg::solve_lower_raw(l, &s, Side::Upper);
    let both = linalg::solve_lower_raw(l, &left.transpose(), Side::Upper);
    both.transpose().symmetrized().scale(0.5)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute gap when both are below 1e-8.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
